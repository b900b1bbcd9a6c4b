use lstma::captioner::{Dims, VariantId};
use lstma::data::generate_toy_dataset;
use lstma::training::{sgd_train, TrainConfig};
use lstma::vocab::build_vocab;
use std::time::Instant;

fn main() {
    let dataset = generate_toy_dataset(42, 50, 16, 0.0).unwrap();
    let captions: Vec<String> = dataset.iter().flat_map(|r| r.captions.iter().cloned()).collect();
    let vocab = build_vocab(&captions, 1).unwrap();
    println!("examples: {}, vocab: {}", captions.len(), vocab.size());
    for h in [96, 128] {
        let dims = Dims { d_v: 16, d_a: dataset[0].attributes.len(), d_s: vocab.size(), d_e: h, h };
        let variant = VariantId::A1;
        let config = TrainConfig { lr: 0.01, batch_size: 32, max_iters: 2000, variant, ..Default::default() };
        let t0 = Instant::now();
        let (_, history) = sgd_train(&config, dims, &dataset, &vocab).unwrap();
        let init = history[0];
        println!(
            "h={h} {variant}: init {:.3} -> final {:.3} (ratio {:.3}) in {:.1}s  [500:{:.2} 1000:{:.2} 1500:{:.2}]",
            init, history.last().unwrap(), history.last().unwrap()/init,
            t0.elapsed().as_secs_f64(), history[499], history[999], history[1499]
        );
    }
}
