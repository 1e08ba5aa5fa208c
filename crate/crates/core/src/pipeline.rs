//! Training, spotting, evaluation and leave-one-subject-out orchestration.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::decode::{decode_video, DecodeConfig};
use crate::dte::encode_dte;
use crate::error::{Error, Result};
use crate::eval::{match_proposals, score, EvalReport, MatchResult};
use crate::io::{sort_proposals, write_json, write_jsonl, AnnotationEntry, Dataset, ProposalRecord, ScoreRecord};
use crate::loss::{total_loss, LossConfig};
use crate::model::{forward_bound, predict, SpotterParams};
use crate::optim::AdamState;
use crate::preprocess::{pad_to_fixed, plan_snippets, FeatureSequence};
use crate::report::format_table;
use crate::synth::split_loso;

/// One padded video with its timestamp labels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub video_id: String,
    pub seq: FeatureSequence,
    pub labels: Vec<f64>,
}

fn check_width(video: &str, width: usize, cfg: &RunConfig) -> Result<()> {
    if width != cfg.model.input_dim {
        return Err(Error::ConfigMismatch(format!(
            "video {video} has feature width {width}, model expects {}",
            cfg.model.input_dim
        )));
    }
    Ok(())
}

/// Loads, pads and labels the given videos. Videos longer than the fixed
/// duration are reported and left out.
pub fn prepare_samples(ds: &Dataset, ids: &[String], cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<String>)> {
    let mut samples = Vec::with_capacity(ids.len());
    let mut skipped = Vec::new();
    for id in ids {
        let x = ds.snippets(id)?;
        check_width(id, x.cols(), cfg)?;
        let seq = match pad_to_fixed(&x, cfg.model.duration) {
            Ok(s) => s,
            Err(e @ Error::ExceedsDuration { .. }) => {
                log::warn!("skipping {id}: {e}");
                skipped.push(id.clone());
                continue;
            }
            Err(e) => return Err(e),
        };
        let plan = ds.plan(id)?;
        let labels = encode_dte(id, ds.ground_truths(id)?, &plan, cfg.model.duration, cfg.foreground_rule)?;
        samples.push(Sample {
            video_id: id.clone(),
            seq,
            labels: labels.as_f64(),
        });
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no trainable videos".into()));
    }
    Ok((samples, skipped))
}

/// Loss values and per-parameter gradients of one sample.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
    pub grads: Vec<Vec<f64>>,
}

pub fn sample_gradient(params: &SpotterParams, sample: &Sample, loss: &LossConfig) -> Result<SampleGrad> {
    let tape = crate::autodiff::Tape::new();
    let bound = params.bind(&tape, true);
    let out = forward_bound(&tape, params, &bound, &sample.seq)?;
    let terms = total_loss(&tape, out.probs, &sample.labels, &sample.seq.mask, loss)?;
    let (total, focal, dice) = (tape.item(terms.total), tape.item(terms.focal), tape.item(terms.dice));
    let mut g = tape.backward(terms.total)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| g.take(v).expect("every parameter is a gradient leaf"))
        .collect();
    Ok(SampleGrad {
        total,
        focal,
        dice,
        grads,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub focal: f64,
    pub dice: f64,
    pub lr: f64,
    pub steps: u64,
}

impl EpochStats {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} loss={:.12e} focal={:.12e} dice={:.12e} lr={:e} steps={}",
            self.epoch, self.loss, self.focal, self.dice, self.lr, self.steps
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SpotterParams,
    pub optimizer: AdamState,
    pub history: Vec<EpochStats>,
    /// Completed epochs, counting any resumed ones.
    pub epoch: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            params: self.params.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn write_line(log: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(log, "{line}").map_err(|e| Error::io("<log>", e))
}

/// Mini-batch Adam over `samples`. `resume` carries the completed epoch count
/// and optimizer state of an earlier run; epochs are numbered after it.
pub fn train(
    mut params: SpotterParams,
    samples: &[Sample],
    cfg: &RunConfig,
    resume: Option<(usize, AdamState)>,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if params.config() != &cfg.model {
        return Err(Error::ConfigMismatch("parameters were built for a different model".into()));
    }
    let o = &cfg.optim;
    let (start, mut adam) = match resume {
        Some((e, a)) => (e, a),
        None => (
            0,
            AdamState::with_betas(params.tensors(), o.lr, o.beta1, o.beta2, o.eps),
        ),
    };
    let mut history = Vec::with_capacity(o.epochs);
    let mut previous: Option<f64> = None;
    for epoch in start + 1..=start + o.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let (mut sum_total, mut sum_focal, mut sum_dice) = (0.0, 0.0, 0.0);
        for batch in order.chunks(o.batch_size) {
            let compute = |&i: &usize| sample_gradient(&params, &samples[i], &cfg.loss);
            let results: Vec<SampleGrad> = if cfg.parallel {
                batch.par_iter().map(compute).collect::<Result<_>>()?
            } else {
                batch.iter().map(compute).collect::<Result<_>>()?
            };
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for (&i, r) in batch.iter().zip(&results) {
                let video = &samples[i].video_id;
                if !r.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        video: video.clone(),
                        detail: format!("focal={} dice={} lr={}", r.focal, r.dice, adam.lr),
                    });
                }
                for ((acc, g), name) in grads.iter_mut().zip(&r.grads).zip(params.names()) {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            video: video.clone(),
                            detail: format!("non-finite gradient for {name}"),
                        });
                    }
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
                sum_total += r.total;
                sum_focal += r.focal;
                sum_dice += r.dice;
            }
            adam.step(params.tensors_mut(), &grads)?;
        }
        let n = samples.len() as f64;
        let stats = EpochStats {
            epoch,
            loss: sum_total / n,
            focal: sum_focal / n,
            dice: sum_dice / n,
            lr: adam.lr,
            steps: adam.step_count(),
        };
        write_line(log, &stats.log_line())?;
        let p = &o.plateau;
        if let Some(prev) = previous {
            let improvement = (prev - stats.loss) / prev.abs().max(f64::MIN_POSITIVE);
            if p.enabled && improvement < p.tolerance && adam.lr < p.max_lr {
                adam.lr = (adam.lr * p.factor).min(p.max_lr);
                write_line(log, &format!("event=lr_switch epoch={epoch} improvement={improvement:.6e} lr={:e}", adam.lr))?;
            }
        }
        previous = Some(stats.loss);
        history.push(stats);
    }
    Ok(TrainOutcome {
        params,
        optimizer: adam,
        history,
        epoch: start + o.epochs,
    })
}

/// Per-timestamp probabilities over the valid snippets of one video.
pub fn score_video(params: &SpotterParams, ds: &Dataset, video_id: &str) -> Result<ScoreRecord> {
    let x = ds.snippets(video_id)?;
    let cfg = params.config();
    if x.cols() != cfg.input_dim {
        return Err(Error::ConfigMismatch(format!(
            "video {video_id} has feature width {}, model expects {}",
            x.cols(),
            cfg.input_dim
        )));
    }
    let seq = pad_to_fixed(&x, cfg.duration)?;
    let mut probs = predict(params, &seq)?;
    probs.truncate(seq.valid_len);
    let e = ds.entry(video_id)?;
    Ok(ScoreRecord {
        video_id: video_id.to_string(),
        fps: e.fps,
        frame_count: e.frame_count,
        snippet_len: ds.manifest.snippet_len,
        overlap: ds.manifest.overlap,
        probs,
    })
}

pub fn score_videos(params: &SpotterParams, ds: &Dataset, ids: &[String], parallel: bool) -> Result<Vec<ScoreRecord>> {
    if parallel {
        ids.par_iter().map(|id| score_video(params, ds, id)).collect()
    } else {
        ids.iter().map(|id| score_video(params, ds, id)).collect()
    }
}

/// Decodes score records into proposals sorted by video id then onset.
pub fn proposals_from_scores(scores: &[ScoreRecord], cfg: &DecodeConfig) -> Result<Vec<ProposalRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for s in scores {
        let plan = plan_snippets(s.frame_count, s.snippet_len, s.overlap)?;
        if s.probs.len() != plan.count {
            return Err(Error::Format {
                what: "scores",
                detail: format!("{}: {} scores for {} snippets", s.video_id, s.probs.len(), plan.count),
            });
        }
        let mask = vec![true; s.probs.len()];
        for p in decode_video(&s.probs, &mask, &plan, s.fps, cfg)? {
            out.push(ProposalRecord::new(&s.video_id, &p));
        }
    }
    sort_proposals(&mut out);
    Ok(out)
}

/// Proposal counts at each threshold.
pub fn theta_sweep(scores: &[ScoreRecord], thetas: &[f64], base: &DecodeConfig) -> Result<Vec<(f64, usize)>> {
    thetas
        .iter()
        .map(|&theta| {
            let cfg = DecodeConfig { theta, ..*base };
            Ok((theta, proposals_from_scores(scores, &cfg)?.len()))
        })
        .collect()
}

/// Precision and recall of the scored videos at each threshold.
pub fn sweep_reports(
    scores: &[ScoreRecord],
    thetas: &[f64],
    base: &DecodeConfig,
    annotations: &BTreeMap<String, AnnotationEntry>,
    k_eval: f64,
) -> Result<Vec<(f64, EvalReport)>> {
    let ids: Vec<String> = scores.iter().map(|s| s.video_id.clone()).collect();
    thetas
        .iter()
        .map(|&theta| {
            let props = proposals_from_scores(scores, &DecodeConfig { theta, ..*base })?;
            let (counts, _) = evaluate(&props, annotations, Some(&ids), k_eval)?;
            Ok((theta, score(&counts)))
        })
        .collect()
}

/// Matches proposals against ground truths video by video and pools the
/// counts. `videos` selects the annotated videos under evaluation (all when
/// `None`); a proposal naming any other video is an error.
pub fn evaluate(
    proposals: &[ProposalRecord],
    annotations: &BTreeMap<String, AnnotationEntry>,
    videos: Option<&[String]>,
    k_eval: f64,
) -> Result<(MatchResult, Vec<(String, MatchResult)>)> {
    let ids: Vec<String> = match videos {
        Some(v) => {
            for id in v {
                if !annotations.contains_key(id) {
                    return Err(Error::UnknownVideo(id.clone()));
                }
            }
            v.to_vec()
        }
        None => annotations.keys().cloned().collect(),
    };
    let mut by_video: BTreeMap<&str, Vec<_>> = ids.iter().map(|id| (id.as_str(), Vec::new())).collect();
    for p in proposals {
        by_video
            .get_mut(p.video_id.as_str())
            .ok_or_else(|| Error::UnknownVideo(p.video_id.clone()))?
            .push(p.proposal());
    }
    let mut total = MatchResult::default();
    let mut per_video = Vec::with_capacity(ids.len());
    for (id, props) in by_video {
        let r = match_proposals(&props, &annotations[id].ground_truths, k_eval);
        total.merge(&r);
        per_video.push((id.to_string(), r));
    }
    Ok((total, per_video))
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub test_subject: String,
    pub train_videos: Vec<String>,
    pub test_videos: Vec<String>,
    pub history: Vec<EpochStats>,
    pub scores: Vec<ScoreRecord>,
    pub proposals: Vec<ProposalRecord>,
    pub counts: MatchResult,
    pub report: EvalReport,
    pub log: String,
}

#[derive(Debug, Clone)]
pub struct LosoOutcome {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: EvalReport,
}

impl LosoOutcome {
    pub fn scores(&self) -> Vec<ScoreRecord> {
        self.folds.iter().flat_map(|f| f.scores.iter().cloned()).collect()
    }
}

fn run_fold(
    ds: &Dataset,
    cfg: &RunConfig,
    fold: &crate::synth::Fold,
    out: Option<&Path>,
) -> Result<FoldOutcome> {
    let mut log = Vec::new();
    let subjects_of = |ids: &[String]| -> Vec<String> {
        let mut s: Vec<String> = ids
            .iter()
            .filter_map(|id| ds.annotations.get(id).map(|a| a.subject_id.clone()))
            .collect();
        s.sort();
        s.dedup();
        s
    };
    let train_subjects = subjects_of(&fold.train);
    let disjoint = !train_subjects.contains(&fold.test_subject);
    write_line(
        &mut log,
        &format!(
            "fold={} train_subjects={} test_subject={} disjoint={disjoint}",
            fold.test_subject,
            train_subjects.join(","),
            fold.test_subject
        ),
    )?;
    assert!(disjoint, "fold {} trains on its test subject", fold.test_subject);

    let (samples, _) = prepare_samples(ds, &fold.train, cfg)?;
    let params = SpotterParams::init(&cfg.model, cfg.seed)?;
    let trained = train(params, &samples, cfg, None, &mut log)?;
    let scores = score_videos(&trained.params, ds, &fold.test, cfg.parallel)?;
    let proposals = proposals_from_scores(&scores, &cfg.decode)?;
    let (counts, _) = evaluate(&proposals, &ds.annotations, Some(&fold.test), cfg.eval.k_eval)?;
    let mut report = score(&counts);
    report.fold = Some(fold.test_subject.clone());

    if let Some(dir) = out {
        let dir = dir.join(format!("fold_{}", fold.test_subject));
        trained.checkpoint().save(&dir.join("model.ckpt"))?;
        write_jsonl(&dir.join("scores.jsonl"), &scores)?;
        write_jsonl(&dir.join("proposals.jsonl"), &proposals)?;
        write_json(&dir.join("report.json"), &report)?;
        crate::io::write_bytes(&dir.join("train.log"), &log)?;
    }
    Ok(FoldOutcome {
        test_subject: fold.test_subject.clone(),
        train_videos: fold.train.clone(),
        test_videos: fold.test.clone(),
        history: trained.history,
        scores,
        proposals,
        counts,
        report,
        log: String::from_utf8(log).expect("log lines are UTF-8"),
    })
}

/// Trains and evaluates one model per held-out subject, then pools counts.
/// With `cfg.parallel` the folds run concurrently; results do not depend on it.
pub fn run_loso(ds: &Dataset, cfg: &RunConfig, out: Option<&Path>, log: &mut dyn Write) -> Result<LosoOutcome> {
    cfg.validate()?;
    let folds = split_loso(&ds.metas())?;
    let outcomes: Vec<FoldOutcome> = if cfg.parallel {
        folds.par_iter().map(|f| run_fold(ds, cfg, f, out)).collect::<Result<_>>()?
    } else {
        folds.iter().map(|f| run_fold(ds, cfg, f, out)).collect::<Result<_>>()?
    };
    let mut total = MatchResult::default();
    for f in &outcomes {
        log.write_all(f.log.as_bytes()).map_err(|e| Error::io("<log>", e))?;
        total.merge(&f.counts);
    }
    let mut aggregate = score(&total);
    aggregate.aggregate = true;
    let mut reports: Vec<EvalReport> = outcomes.iter().map(|f| f.report.clone()).collect();
    reports.push(aggregate.clone());
    write_line(log, &format_table(&reports))?;
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &reports)?;
        crate::io::write_bytes(&dir.join("report.txt"), format_table(&reports).as_bytes())?;
    }
    Ok(LosoOutcome {
        folds: outcomes,
        aggregate,
    })
}
