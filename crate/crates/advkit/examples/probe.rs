use advkit::data::{gen_dataset, DatasetKind};
use advkit::harness::train_model;
use advkit::net::accuracy;

fn main() {
    for (arch, epochs, lr) in [(vec![2usize,12,2], 60usize, 0.3), (vec![2,16,16,2], 100, 0.3), (vec![2,16,2], 200, 0.5), (vec![2,32,2], 200, 0.3), (vec![2,16,16,2], 200, 0.1)] {
        let train = gen_dataset(DatasetKind::TwoMoons, 200, 0.08, 11).unwrap().samples();
        let test = gen_dataset(DatasetKind::TwoMoons, 200, 0.08, 12).unwrap().samples();
        let net = train_model(&arch, &train, epochs, lr, 3).unwrap();
        println!("{arch:?} e{epochs} lr{lr}: train {:.3} test {:.3}", accuracy(&net, &train).unwrap(), accuracy(&net, &test).unwrap());
    }
}
