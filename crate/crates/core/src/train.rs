//! Training loops: factored (one model per tag), joint (shared encoder),
//! LM-interpolated, and independently seeded ensembles.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::charlm::WittenBellLm;
use crate::data::{build_vocab, tags_of, Example};
use crate::error::{Error, Result};
use crate::model::{CharVocab, HeadInit, InflectionModel, ModelConfig, ModelVariant};
use crate::nn::{AdaDeltaConfig, AdaDeltaState, Tape};
use crate::search::{default_max_len, greedy_decode};

/// `lambda_hat` used to make the interpolation weight effectively zero.
pub const LAMBDA_HAT_OFF: f64 = -50.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Embedding size; `None` uses the vocabulary size.
    pub embed_dim: Option<usize>,
    pub l2: f64,
    pub epochs: usize,
    pub ensemble_k: usize,
    pub seed: u64,
    pub beam_width: usize,
    pub variant: ModelVariant,
    pub rho: f64,
    pub epsilon: f64,
    /// Initial `lambda_hat` for interpolated training (`lambda = softplus`).
    pub lambda_init: f64,
    /// Keep `lambda_hat` at its initial value.
    pub freeze_lambda: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let ada = AdaDeltaConfig::default();
        TrainConfig {
            hidden: 100,
            embed_dim: None,
            l2: ada.l2,
            epochs: 30,
            ensemble_k: 5,
            seed: 0,
            beam_width: crate::search::DEFAULT_BEAM_WIDTH,
            variant: ModelVariant::Full,
            rho: ada.rho,
            epsilon: ada.epsilon,
            lambda_init: 0.0,
            freeze_lambda: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed_dim == Some(0) {
            return Err(Error::invalid("hidden and embedding sizes must be >= 1"));
        }
        if self.epochs == 0 || self.ensemble_k == 0 || self.beam_width == 0 {
            return Err(Error::invalid(
                "epochs, ensemble size and beam width must be >= 1",
            ));
        }
        if self.l2.is_nan() || self.l2 < 0.0 {
            return Err(Error::invalid("l2 must be >= 0"));
        }
        if !self.lambda_init.is_finite() {
            return Err(Error::invalid("lambda_init must be finite"));
        }
        Ok(())
    }

    fn adadelta(&self) -> AdaDeltaConfig {
        AdaDeltaConfig {
            rho: self.rho,
            epsilon: self.epsilon,
            l2: self.l2,
        }
    }

    fn model_config(&self, vocab: &CharVocab) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            embed_dim: self.embed_dim.unwrap_or(vocab.len()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-example loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub dev_accuracy: Option<f64>,
    /// Mean teacher-forced dev loss, the tie-breaker between equally accurate
    /// epochs.
    pub dev_loss: Option<f64>,
}

impl fmt::Display for EpochLog {
    /// `epoch TAB train_loss TAB dev_accuracy TAB dev_loss` (`-` without dev
    /// data).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.dev_accuracy, self.dev_loss) {
            (Some(a), Some(l)) => write!(f, "{}\t{}\t{a}\t{l}", self.epoch, self.train_loss),
            _ => write!(f, "{}\t{}\t-\t-", self.epoch, self.train_loss),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the selected epoch.
    pub model: InflectionModel,
    pub log: Vec<EpochLog>,
    /// 1-based epoch the model comes from.
    pub best_epoch: usize,
    pub best_dev_accuracy: Option<f64>,
}

impl TrainOutcome {
    pub fn log_text(&self) -> String {
        self.log.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Exact-match accuracy of greedy decoding. Examples whose tag the model
/// lacks count as wrong.
pub fn dev_accuracy(
    model: &InflectionModel,
    dev: &[Example],
    lm: Option<&WittenBellLm>,
) -> Result<f64> {
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let correct = dev
        .par_iter()
        .map(|e| -> Result<usize> {
            if !model.has_tag(&e.tag) {
                return Ok(0);
            }
            let x = model.vocab().encode(&e.lemma);
            let out = greedy_decode(&[model], &e.tag, &x, default_max_len(x.len()), lm)?;
            Ok(usize::from(out.text(model.vocab()) == e.inflected))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(correct as f64 / dev.len() as f64)
}

/// Mean teacher-forced loss over the examples whose tag the model has.
pub fn dev_loss(
    model: &InflectionModel,
    dev: &[Example],
    lm: Option<&WittenBellLm>,
) -> Result<f64> {
    let own: Vec<&Example> = dev.iter().filter(|e| model.has_tag(&e.tag)).collect();
    if own.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    let total = own
        .par_iter()
        .map(|e| -> Result<f64> {
            let x = model.vocab().encode(&e.lemma);
            let y = model.vocab().encode(&e.inflected);
            let mut tape = Tape::new(model.store());
            let loss = model.sequence_loss(&mut tape, &e.tag, &x, &y, lm)?;
            Ok(tape.scalar(loss))
        })
        .try_reduce(|| 0.0, |a, b| Ok(a + b))?;
    Ok(total / own.len() as f64)
}

/// One teacher-forced AdaDelta update. Returns the loss before the update.
pub fn train_step(
    model: &mut InflectionModel,
    opt: &mut AdaDeltaState,
    example: &Example,
    lm: Option<&WittenBellLm>,
) -> Result<f64> {
    let x = model.vocab().encode(&example.lemma);
    let y = model.vocab().encode(&example.inflected);
    let (loss, grads) = {
        let mut tape = Tape::new(model.store());
        let loss = model.sequence_loss(&mut tape, &example.tag, &x, &y, lm)?;
        (tape.scalar(loss), tape.backward(loss)?)
    };
    opt.step(model.store_mut(), &grads)?;
    Ok(loss)
}

/// Runs the epoch loop on an initialised model: one shuffled pass of batch
/// size 1 per epoch, then dev accuracy and dev loss. Keeps the epoch with the
/// best dev accuracy, breaking ties by lower dev loss and then by the earlier
/// epoch; without dev data keeps the last epoch.
pub fn fit(
    mut model: InflectionModel,
    train: &[Example],
    dev: &[Example],
    lm: Option<&WittenBellLm>,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::NoExamples("training set is empty".into()));
    }
    let mut opt = AdaDeltaState::new(model.store(), config.adadelta())?;
    let frozen: Vec<_> = if config.freeze_lambda {
        model
            .tags()
            .filter_map(|t| model.head(t).ok().and_then(|h| h.lambda_hat))
            .map(|id| (id, model.store().get(id).clone()))
            .collect()
    } else {
        Vec::new()
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    // (model, epoch, (dev accuracy, dev loss))
    type Best = (InflectionModel, usize, Option<(f64, f64)>);
    let mut best: Option<Best> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for &i in &order {
            total += train_step(&mut model, &mut opt, &train[i], lm)?;
            for (id, value) in &frozen {
                *model.store_mut().get_mut(*id) = value.clone();
            }
        }
        let score = if dev.is_empty() {
            None
        } else {
            Some((dev_accuracy(&model, dev, lm)?, dev_loss(&model, dev, lm)?))
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / train.len() as f64,
            dev_accuracy: score.map(|s| s.0),
            dev_loss: score.map(|s| s.1),
        });
        let improves = match (&best, score) {
            (Some((_, _, Some((b_acc, b_loss)))), Some((acc, loss))) => {
                acc > *b_acc || (acc == *b_acc && loss < *b_loss)
            }
            _ => true,
        };
        if improves {
            best = Some((model.clone(), epoch, score));
        }
    }
    let (model, best_epoch, score) = best.expect("epochs >= 1");
    let best_dev_accuracy = score.map(|s| s.0);
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_dev_accuracy,
    })
}

fn of_tag(examples: &[Example], tag: &str) -> Vec<Example> {
    examples
        .iter()
        .filter(|e| e.tag == tag)
        .cloned()
        .collect::<Vec<_>>()
}

/// Vocabulary shared by every model trained on `train`.
pub fn training_vocab(train: &[Example]) -> Result<CharVocab> {
    build_vocab(train).map_err(|_| Error::NoExamples("training set is empty".into()))
}

/// One model for `tag`, trained on that tag's examples. The vocabulary covers
/// all of `train` so that models of different tags agree on ids.
pub fn train_factored(
    train: &[Example],
    dev: &[Example],
    tag: &str,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = training_vocab(train)?;
    let own = of_tag(train, tag);
    if own.is_empty() {
        return Err(Error::NoExamples(format!(
            "no training examples for tag `{tag}`"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = InflectionModel::new(
        vocab.clone(),
        config.model_config(&vocab),
        config.variant,
        &[tag.to_string()],
        HeadInit { lambda_hat: None },
        &mut rng,
    )?;
    fit(model, &own, &of_tag(dev, tag), None, config, &mut rng)
}

/// Factored models for every tag of `train`, trained in parallel.
pub fn train_factored_all(
    train: &[Example],
    dev: &[Example],
    config: &TrainConfig,
) -> Result<Vec<(String, TrainOutcome)>> {
    tags_of(train)
        .into_par_iter()
        .map(|tag| {
            let out = train_factored(train, dev, &tag, config)?;
            Ok((tag, out))
        })
        .collect()
}

/// One model with a head per tag over a shared embedding table and encoder.
/// Examples of all tags are shuffled into a single stream; selection uses
/// accuracy over the whole dev set.
pub fn train_joint(
    train: &[Example],
    dev: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = training_vocab(train)?;
    let tags = tags_of(train);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = InflectionModel::new(
        vocab.clone(),
        config.model_config(&vocab),
        config.variant,
        &tags,
        HeadInit { lambda_hat: None },
        &mut rng,
    )?;
    let known: BTreeSet<&str> = tags.iter().map(String::as_str).collect();
    let dev: Vec<Example> = dev
        .iter()
        .filter(|e| known.contains(e.tag.as_str()))
        .cloned()
        .collect();
    fit(model, train, &dev, None, config, &mut rng)
}

/// Factored training whose per-step distribution is the model distribution
/// times `p_lm^lambda`, renormalised, with `lambda = softplus(lambda_hat)`
/// learned alongside the other parameters.
pub fn train_interpolated(
    train: &[Example],
    dev: &[Example],
    tag: &str,
    lm: &WittenBellLm,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let vocab = training_vocab(train)?;
    lm.check_compatible(&vocab)?;
    let own = of_tag(train, tag);
    if own.is_empty() {
        return Err(Error::NoExamples(format!(
            "no training examples for tag `{tag}`"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = InflectionModel::new(
        vocab.clone(),
        config.model_config(&vocab),
        config.variant,
        &[tag.to_string()],
        HeadInit {
            lambda_hat: Some(config.lambda_init),
        },
        &mut rng,
    )?;
    fit(model, &own, &of_tag(dev, tag), Some(lm), config, &mut rng)
}

/// `k` member seeds derived from `base`.
pub fn member_seeds(base: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Runs `train_fn` once per seed, in parallel; results follow seed order.
pub fn train_ensemble<T, F>(seeds: &[u64], train_fn: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if seeds.is_empty() {
        return Err(Error::invalid("an ensemble needs at least one seed"));
    }
    let distinct: BTreeSet<u64> = seeds.iter().copied().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::invalid(format!(
            "duplicate ensemble seeds in {seeds:?}"
        )));
    }
    seeds.par_iter().map(|&s| train_fn(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;

    fn small(seed: u64) -> TrainConfig {
        TrainConfig {
            hidden: 8,
            embed_dim: Some(6),
            epochs: 3,
            seed,
            ..TrainConfig::default()
        }
    }

    fn data() -> Vec<Example> {
        vec![
            Example::new("talo", "ine", "talossa"),
            Example::new("kylä", "ine", "kylässä"),
            Example::new("talo", "ela", "talosta"),
            Example::new("kylä", "ela", "kylästä"),
        ]
    }

    #[test]
    fn epoch_log_line_format() {
        let l = EpochLog {
            epoch: 3,
            train_loss: 0.5,
            dev_accuracy: Some(0.75),
            dev_loss: Some(1.25),
        };
        assert_eq!(l.to_string(), "3\t0.5\t0.75\t1.25");
        let l = EpochLog {
            dev_accuracy: None,
            dev_loss: None,
            ..l
        };
        assert_eq!(l.to_string(), "3\t0.5\t-\t-");
    }

    #[test]
    fn missing_tag_is_an_error() {
        let err = train_factored(&data(), &[], "abl", &small(0)).unwrap_err();
        assert!(matches!(err, Error::NoExamples(_)), "{err}");
    }

    #[test]
    fn factored_training_is_deterministic() {
        let a = train_factored(&data(), &data(), "ine", &small(4)).unwrap();
        let b = train_factored(&data(), &data(), "ine", &small(4)).unwrap();
        assert_eq!(a.model.to_json().unwrap(), b.model.to_json().unwrap());
        assert_eq!(a.log, b.log);
        let c = train_factored(&data(), &data(), "ine", &small(5)).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn selection_prefers_accuracy_then_dev_loss() {
        let out = train_factored(&data(), &data(), "ine", &small(1)).unwrap();
        let best = out.best_dev_accuracy.unwrap();
        let best_loss = out.log[out.best_epoch - 1].dev_loss.unwrap();
        for l in &out.log {
            let (acc, loss) = (l.dev_accuracy.unwrap(), l.dev_loss.unwrap());
            assert!(acc <= best);
            if acc == best && l.epoch < out.best_epoch {
                assert!(loss > best_loss);
            }
            if acc == best && l.epoch > out.best_epoch {
                assert!(loss >= best_loss);
            }
        }
        assert_eq!(
            dev_accuracy(&out.model, &of_tag(&data(), "ine"), None).unwrap(),
            best
        );
    }

    #[test]
    fn joint_model_shares_encoder_across_tags() {
        let out = train_joint(&data(), &[], &small(2)).unwrap();
        let m = &out.model;
        assert_eq!(m.tags().collect::<Vec<_>>(), vec!["ela", "ine"]);
        let shared = m.shared_param_ids();
        for tag in ["ela", "ine"] {
            let head = m.head(tag).unwrap();
            let (w, _) = head.trans.unwrap();
            assert!(!shared.contains(&w));
        }
        assert_eq!(out.best_epoch, 3);
    }

    #[test]
    fn step_on_one_tag_moves_other_tags_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = build_vocab(&data()).unwrap();
        let tags = vec!["ela".to_string(), "ine".to_string()];
        let mut m = InflectionModel::new(
            vocab,
            ModelConfig {
                hidden: 6,
                embed_dim: 5,
            },
            ModelVariant::Full,
            &tags,
            HeadInit { lambda_hat: None },
            &mut rng,
        )
        .unwrap();
        let encode_b = |m: &InflectionModel| {
            let mut tape = Tape::new(m.store());
            let x = m.vocab().encode("talo");
            let enc = m.encode(&mut tape, "ela", &x).unwrap();
            tape.value(enc.e.unwrap()).to_vec()
        };
        let before = encode_b(&m);
        let mut opt = AdaDeltaState::new(m.store(), AdaDeltaConfig::default()).unwrap();
        train_step(&mut m, &mut opt, &data()[0], None).unwrap();
        assert_ne!(before, encode_b(&m));
    }

    #[test]
    fn frozen_off_lambda_matches_factored_losses() {
        let lm = WittenBellLm::train(&["talossa", "kylässä", "talo"], 3).unwrap();
        let cfg = TrainConfig {
            lambda_init: LAMBDA_HAT_OFF,
            freeze_lambda: true,
            ..small(6)
        };
        let plain = train_factored(&data(), &[], "ine", &cfg).unwrap();
        let interp = train_interpolated(&data(), &[], "ine", &lm, &cfg).unwrap();
        for (a, b) in plain.log.iter().zip(&interp.log) {
            assert!((a.train_loss - b.train_loss).abs() < 1e-6);
        }
        let lambda = interp.model.lambda("ine").unwrap().unwrap();
        assert!((0.0..1e-20).contains(&lambda));
    }

    #[test]
    fn learned_lambda_is_non_negative_and_moves() {
        let lm = WittenBellLm::train(&["talossa", "kylässä", "talo"], 3).unwrap();
        let cfg = TrainConfig {
            lambda_init: 0.0,
            ..small(6)
        };
        let out = train_interpolated(&data(), &[], "ine", &lm, &cfg).unwrap();
        let lambda = out.model.lambda("ine").unwrap().unwrap();
        assert!(lambda >= 0.0);
        assert_ne!(lambda, crate::nn::softplus(0.0));
    }

    #[test]
    fn lambda_gradient_matches_finite_differences() {
        let lm = WittenBellLm::train(&["talossa", "kylässä", "talo"], 3).unwrap();
        let vocab = build_vocab(&data()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = InflectionModel::new(
            vocab,
            ModelConfig {
                hidden: 4,
                embed_dim: 3,
            },
            ModelVariant::Full,
            &["ine".to_string()],
            HeadInit {
                lambda_hat: Some(0.3),
            },
            &mut rng,
        )
        .unwrap();
        m.store_mut().scale(5.0);
        let x = m.vocab().encode("kylä");
        let y = m.vocab().encode("kylässä");
        let report = gradient_check(m.store(), 1e-4, |tape| {
            m.sequence_loss(tape, "ine", &x, &y, Some(&lm))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let id = m.head("ine").unwrap().lambda_hat.unwrap();
        let mut tape = Tape::new(m.store());
        let loss = m
            .sequence_loss(&mut tape, "ine", &x, &y, Some(&lm))
            .unwrap();
        assert!(tape.backward(loss).unwrap().get(id).data()[0].abs() > 1e-6);
    }

    #[test]
    fn lm_alphabet_mismatch_rejected() {
        let lm = WittenBellLm::train(&["qqq"], 2).unwrap();
        assert!(train_interpolated(&data(), &[], "ine", &lm, &small(0)).is_err());
    }

    #[test]
    fn ensemble_contract() {
        let seeds = member_seeds(10, 3);
        assert_eq!(seeds, vec![10, 11, 12]);
        let models =
            train_ensemble(&seeds, |s| train_factored(&data(), &[], "ine", &small(s))).unwrap();
        assert_eq!(models.len(), 3);
        assert_ne!(models[0].model, models[1].model);
        let direct = train_factored(&data(), &[], "ine", &small(10)).unwrap();
        assert_eq!(models[0], direct);
        assert!(train_ensemble(&[1, 1], Ok).is_err());
        assert_eq!(train_ensemble(&[7], Ok).unwrap(), vec![7]);
    }

    #[test]
    fn l2_shrinks_parameters_without_data_gradient() {
        let mut m = InflectionModel::new(
            build_vocab(&data()).unwrap(),
            ModelConfig {
                hidden: 3,
                embed_dim: 2,
            },
            ModelVariant::Full,
            &["ine".to_string()],
            HeadInit { lambda_hat: None },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let cfg = AdaDeltaConfig {
            l2: 1e-2,
            ..AdaDeltaConfig::default()
        };
        let mut opt = AdaDeltaState::new(m.store(), cfg).unwrap();
        let zero = crate::nn::Gradients::zeros_like(m.store());
        let norm = |m: &InflectionModel| -> f64 {
            m.store().iter().map(|(_, _, t)| t.sum_squares()).sum()
        };
        let mut prev = norm(&m);
        for _ in 0..5 {
            opt.step(m.store_mut(), &zero).unwrap();
            let now = norm(&m);
            assert!(now < prev);
            prev = now;
        }
    }
}
