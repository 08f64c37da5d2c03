use xilbench_core::decoy::*;
use xilbench_core::trainer::*;
use xilbench_core::objectives::FeedbackType;
use xilbench_core::model::NetworkConfig;
use ndarray::Array2;

fn garment(index: usize) -> Array2<u8> {
    let label = index % NUM_CLASSES;
    Array2::from_shape_fn((IMAGE_SIDE, IMAGE_SIDE), |(i, j)| {
        if (5..23).contains(&i) && (5..23).contains(&j) { (40 + 20 * label + (i + j + index) % 7) as u8 } else { 0 }
    })
}

fn main() {
    let clean = CleanSet::new((0..100).map(garment).collect(), (0..100).map(|i| (i % 10) as u8).collect());
    let bundle = generate_decoy(&clean, &DecoySpec::random(1), Split::Train).unwrap();
    let config = TrainConfig {
        dataset_variant: Variant::Random,
        feedback_type: FeedbackType::None,
        epochs: 3,
        batch_size: 10,
        seed: 5,
        initial_lr: 0.02,
        network: NetworkConfig { conv_channels: (2,2,3), kernel_size: 3, fc_hidden: 8, num_classes: 10, input_side: 28, pool_stages: (true, true) },
        ..TrainConfig::default()
    };
    let (_, log) = train::<f64>(&config, &bundle).unwrap();
    for s in &log.steps {
        println!("step {} total {:.4} ce {:.4}", s.step, s.breakdown.total, s.breakdown.classification);
    }
}
