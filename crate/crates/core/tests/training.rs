use otkt::encoders::EncoderConfig;
use otkt::synthdata::{gen_corpus, Corpus, CorpusConfig};
use otkt::training::{evaluate, train, HyperParams, Mode, Model};

fn single_utterance() -> Corpus {
    let mut corpus = gen_corpus(&CorpusConfig {
        train_utts: 1,
        dev_utts: 1,
        test_utts: 1,
        noise_std: 0.5,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    corpus.dev = corpus.train.clone();
    corpus
}

fn smoke_hp(epochs: usize) -> HyperParams {
    HyperParams {
        epochs,
        batch_size: 1,
        base_lr: 3e-3,
        warmup_steps: 30,
        average_last: 1,
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn overfit_loss_decreases_in_fifty_steps() {
    let corpus = single_utterance();
    let model = Model::new(&EncoderConfig::default(), 2).unwrap();
    let out = train(model, &corpus, &smoke_hp(50), Mode::Baseline, |_, _| {}).unwrap();
    assert_eq!(out.steps, 50);
    let first = out.history.first().unwrap().train.ctc;
    let last = out.history.last().unwrap().train.ctc;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn overfit_single_utterance_within_300_steps() {
    let corpus = single_utterance();
    let model = Model::new(&EncoderConfig::default(), 2).unwrap();
    let out = train(model, &corpus, &smoke_hp(300), Mode::Baseline, |_, _| {}).unwrap();
    let best = out.history.iter().map(|m| m.train.ctc).fold(f64::INFINITY, f64::min);
    assert!(best < 0.1, "lowest ctc {best}");
    let report = evaluate(&out.model.student, false, &corpus.train).unwrap();
    assert_eq!(report.edits, 0);
}

fn small_corpus(noise_std: f64, seed: u64) -> Corpus {
    gen_corpus(&CorpusConfig {
        train_utts: 12,
        dev_utts: 4,
        test_utts: 4,
        noise_std,
        seed,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn same_seed_same_history() {
    let corpus = small_corpus(0.5, 3);
    let hp = HyperParams {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..Default::default()
    };
    let run = || {
        let model = Model::new(&EncoderConfig::default(), 9).unwrap();
        train(model, &corpus, &hp, Mode::Transfer, |_, _| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.student.params, b.model.student.params);
}

#[test]
fn teacher_is_frozen_in_every_mode() {
    let corpus = small_corpus(0.5, 4);
    let hp = HyperParams {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    for mode in Mode::ALL {
        let model = Model::new(&EncoderConfig::default(), 1).unwrap();
        let before = model.teacher.params().clone();
        let out = train(model, &corpus, &hp, mode, |_, _| {}).unwrap();
        assert_eq!(out.model.teacher.params(), &before, "{mode}");
        for m in &out.history {
            assert!(m.train.identity_residual(mode.effective_lambda(hp.lambda), hp.w) < 1e-12);
        }
    }
}

#[test]
fn final_model_averages_last_epochs() {
    let corpus = small_corpus(0.5, 5);
    let hp = HyperParams {
        epochs: 3,
        batch_size: 6,
        average_last: 2,
        ..Default::default()
    };
    let mut seen = Vec::new();
    let model = Model::new(&EncoderConfig::default(), 1).unwrap();
    let out = train(model, &corpus, &hp, Mode::Baseline, |_, s| seen.push(s.params.clone())).unwrap();
    assert_eq!(seen.len(), 3);
    let expected = otkt::training::average_params(&[&seen[1], &seen[2]]).unwrap();
    assert_eq!(out.model.student.params, expected);
}
