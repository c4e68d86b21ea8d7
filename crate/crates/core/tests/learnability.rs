use otkt::encoders::EncoderConfig;
use otkt::synthdata::{gen_corpus, CorpusConfig};
use otkt::training::{evaluate, train, HyperParams, Mode, Model};

fn baseline_dev_cer(noise_std: f64, seed: u64) -> f64 {
    let corpus = gen_corpus(&CorpusConfig {
        noise_std,
        seed,
        ..Default::default()
    })
    .unwrap();
    let hp = HyperParams {
        seed,
        ..Default::default()
    };
    let model = Model::new(&EncoderConfig::default(), seed).unwrap();
    let out = train(model, &corpus, &hp, Mode::Baseline, |_, _| {}).unwrap();
    evaluate(&out.model.student, false, &corpus.dev).unwrap().cer()
}

#[test]
fn more_noise_is_harder_to_learn() {
    let levels = [0.0, 1.0, 2.0];
    let means: Vec<f64> = levels
        .iter()
        .map(|&noise| (0..3).map(|seed| baseline_dev_cer(noise, seed)).sum::<f64>() / 3.0)
        .collect();
    assert!(means[0] < 0.05, "noiseless dev CER {means:?}");
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}
