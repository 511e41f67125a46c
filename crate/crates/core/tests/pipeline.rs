use morphogen::charlm::WittenBellLm;
use morphogen::data::{
    flatten_tables, group_tables, parse_dataset, synth_corpus, tags_of, write_dataset, Example,
    SynthCorpus, SynthSpec,
};
use morphogen::eval::{evaluate_accuracy, DecodeConfig, EvalReport, Predictor};
use morphogen::model::InflectionModel;
use morphogen::rerank::{pro_train, ProConfig, RerankModel, TrainingGroup};
use morphogen::search::{beam_decode_all, greedy_decode, read_nbest, write_nbest};
use morphogen::train::{
    member_seeds, train_ensemble, train_factored, train_interpolated, train_joint, TrainConfig,
};

fn corpus() -> SynthCorpus {
    synth_corpus(&SynthSpec::default(), 40, 40, [0.5, 0.25, 0.25], 3).unwrap()
}

fn small(seed: u64) -> TrainConfig {
    TrainConfig {
        hidden: 12,
        epochs: 3,
        ensemble_k: 1,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_files_round_trip_through_disk() {
    let c = corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.tsv");
    let train = flatten_tables(&c.split.train);
    write_dataset(&path, &train).unwrap();
    let back = parse_dataset(&path).unwrap();
    assert_eq!(back, train);
    let mut by_lemma = c.split.train.clone();
    by_lemma.sort_by(|a, b| a.lemma.cmp(&b.lemma));
    assert_eq!(group_tables(&back).unwrap(), by_lemma);
    assert_eq!(tags_of(&back).len(), 4);
}

#[test]
fn joint_model_survives_checkpoint_and_predicts_the_same() {
    let c = corpus();
    let train = flatten_tables(&c.split.train);
    let dev = flatten_tables(&c.split.dev);
    let out = train_joint(&train, &dev, &small(1)).unwrap();
    assert_eq!(out.log.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("joint.ckpt");
    out.model.save(&path).unwrap();
    let loaded = InflectionModel::load(&path).unwrap();

    let config = DecodeConfig {
        beam_width: 4,
        ..DecodeConfig::default()
    };
    let a = Predictor::new(vec![&out.model], config).unwrap();
    let b = Predictor::new(vec![&loaded], config).unwrap();
    assert_eq!(a.predict_all(&dev).unwrap(), b.predict_all(&dev).unwrap());

    let report = evaluate_accuracy(&b, &dev).unwrap();
    let preds = b.predict_all(&dev).unwrap();
    let hits = dev
        .iter()
        .zip(&preds)
        .filter(|(e, p)| e.inflected == **p)
        .count();
    assert_eq!(report.overall.correct, hits);
    assert_eq!(report.overall.total, dev.len());
}

#[test]
fn factored_models_cover_tags_together() {
    let c = corpus();
    let train = flatten_tables(&c.split.train);
    let test = flatten_tables(&c.split.test);
    let models: Vec<InflectionModel> = tags_of(&train)
        .iter()
        .map(|t| train_factored(&train, &[], t, &small(2)).unwrap().model)
        .collect();
    let p = Predictor::new(models.iter().collect(), DecodeConfig::default()).unwrap();
    let preds = p.predict_all(&test).unwrap();
    let report = EvalReport::score(&test, &preds).unwrap();
    assert_eq!(report.per_tag.len(), 4);

    let one = Predictor::new(vec![&models[0]], DecodeConfig::default()).unwrap();
    assert!(one.predict_all(&test).is_err());
}

#[test]
fn ensemble_members_differ_and_decode_together() {
    let c = corpus();
    let train = flatten_tables(&c.split.train);
    let tag = tags_of(&train)[0].clone();
    let seeds = member_seeds(10, 3);
    let members = train_ensemble(&seeds, |seed| {
        train_factored(&train, &[], &tag, &small(seed)).map(|o| o.model)
    })
    .unwrap();
    assert_eq!(members.len(), 3);
    assert_ne!(members[0], members[1]);
    let alone = train_factored(&train, &[], &tag, &small(11)).unwrap().model;
    assert_eq!(members[1], alone);

    let refs: Vec<&InflectionModel> = members.iter().collect();
    let p = Predictor::new(refs.clone(), DecodeConfig::default()).unwrap();
    let lemma = &c.split.test[0].lemma;
    let x = members[0].vocab().encode(lemma);
    let direct = greedy_decode(&refs, &tag, &x, x.len() + 10, None).unwrap();
    assert_eq!(
        p.predict(lemma, &tag).unwrap(),
        direct.text(members[0].vocab())
    );
}

#[test]
fn interpolated_training_learns_lambda_unless_frozen() {
    let c = corpus();
    let train = flatten_tables(&c.split.train);
    let lm = WittenBellLm::train(&c.wordlist, 4).unwrap();
    let tag = tags_of(&train)[1].clone();
    let config = TrainConfig {
        lambda_init: -1.0,
        ..small(4)
    };
    let init = softplus(-1.0);
    let learned = train_interpolated(&train, &[], &tag, &lm, &config)
        .unwrap()
        .model;
    let lambda = learned.lambda(&tag).unwrap().unwrap();
    assert!((lambda - init).abs() > 1e-9, "{lambda}");
    let frozen = TrainConfig {
        freeze_lambda: true,
        ..config
    };
    let fixed = train_interpolated(&train, &[], &tag, &lm, &frozen)
        .unwrap()
        .model;
    assert_eq!(fixed.lambda(&tag).unwrap().unwrap(), init);

    let p = Predictor::new(vec![&learned], DecodeConfig::default())
        .unwrap()
        .with_lm(&lm);
    let own: Vec<Example> = flatten_tables(&c.split.test)
        .into_iter()
        .filter(|e| e.tag == tag)
        .collect();
    assert_eq!(p.predict_all(&own).unwrap().len(), own.len());
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[test]
fn nbest_file_feeds_reranker_training() {
    let c = corpus();
    let train = flatten_tables(&c.split.train);
    let dev = flatten_tables(&c.split.dev);
    let model = train_joint(&train, &[], &small(5)).unwrap().model;
    let inputs: Vec<(String, String)> = dev
        .iter()
        .map(|e| (e.lemma.clone(), e.tag.clone()))
        .collect();
    let nbest = beam_decode_all(&[&model], &inputs, 5, 10, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dev.nbest");
    write_nbest(&path, &nbest).unwrap();
    let back = read_nbest(&path).unwrap();
    assert_eq!(back, nbest);

    let lm = WittenBellLm::train(&c.wordlist, 5).unwrap();
    let groups: Vec<TrainingGroup<'_>> = back
        .iter()
        .zip(&dev)
        .map(|(n, e)| TrainingGroup {
            nbest: n,
            gold: &e.inflected,
        })
        .collect();
    let reranker = pro_train(&groups, &lm, ProConfig::default()).unwrap();
    let rpath = dir.path().join("rerank.txt");
    reranker.save(&rpath).unwrap();
    let reloaded = RerankModel::load(&rpath).unwrap();
    assert_eq!(reloaded, reranker);
    for n in &back {
        assert!(reloaded.rerank(n, &lm).unwrap() < n.candidates.len());
    }
}
