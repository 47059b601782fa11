use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{PhaseDefaults, PhaseSection, RunConfig};
use super::eval::{evaluate, EvalReport};
use super::metrics::{JsonlWriter, StepRecord};
use super::model::{fused_states, mask_tensor, Model};
use crate::adversary::adv_objective;
use crate::club::{alternate, club_estimate, fit_q_step, Phase};
use crate::decoupler::ortho_loss;
use crate::diffcore::{Graph, Optimizer, OptimizerConfig, ParamStore};
use crate::error::{Error, Result};
use crate::losses::{fuse_masks, mask_losses, triple_supervision, AuxTerms};
use crate::synthdata::{mix_seed, Dataset, Sample};

const PHASE1_SALT: u64 = 0x9E71;
const PHASE2_SALT: u64 = 0x9E72;

pub const PHASE1_CKPT: &str = "phase1.ckpt";
pub const PHASE2_CKPT: &str = "phase2.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

/// Outputs of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub steps: usize,
    /// Text-decoder checksum at the start and end of the phase.
    pub text_decoder_checksum: (u32, u32),
    pub final_eval: EvalReport,
}

#[derive(Serialize)]
struct TimingRecord<'a> {
    step: usize,
    phase: &'a str,
    seconds: f64,
}

/// Loads the configured dataset and checks it against the config.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = Dataset::read(&cfg.data.path)?;
    let g = &cfg.data.generation;
    if ds.is_empty() {
        return Err(Error::contract(format!("{}: dataset is empty", cfg.data.path.display())));
    }
    if ds.height != g.height || ds.width != g.width || ds.dim != cfg.data.factors.dim {
        return Err(Error::Config(format!(
            "{}: dataset is {}x{} with dim {}, config expects {}x{} with dim {}",
            cfg.data.path.display(),
            ds.height,
            ds.width,
            ds.dim,
            g.height,
            g.width,
            cfg.data.factors.dim
        )));
    }
    Ok(ds)
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let snap = dir.join("config.toml");
    std::fs::write(&snap, cfg.to_toml_string()?).map_err(|e| Error::io(&snap, e))?;
    Ok(dir)
}

fn write_report(dir: &Path, name: &str, report: &EvalReport) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::contract(format!("{e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Gives parameters that took no part in this step a zero gradient so the
/// optimizer can step the whole group.
fn step_group(store: &mut ParamStore, opt: &mut Optimizer) -> Result<()> {
    for &id in opt.params() {
        let t = store.get_mut(id);
        if t.grad().is_none() {
            let z = vec![0.0; t.numel()];
            t.accumulate_grad(&z)?;
        }
    }
    opt.step(store)
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("step {step}: {name} is not finite")))
    }
}

struct Batcher<'a> {
    train: &'a [Sample],
    batch: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    fn new<P: PhaseDefaults>(train: &'a [Sample], p: &PhaseSection<P>, seed: u64) -> Result<Self> {
        if p.batch > train.len() {
            return Err(Error::Config(format!("batch {} exceeds {} training scenes", p.batch, train.len())));
        }
        Ok(Batcher {
            train,
            batch: p.batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn next(&mut self) -> Vec<&'a Sample> {
        let idx = sample_indices(&mut self.rng, self.train.len(), self.batch);
        idx.iter().map(|i| &self.train[i]).collect()
    }
}

fn eval_fields(r: &EvalReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("eval_miou".to_string(), r.miou),
        ("eval_miou_text".to_string(), r.miou_text),
        ("eval_miou_visual".to_string(), r.miou_visual),
        ("eval_miou_real_text".to_string(), r.miou_real_text),
    ])
}

/// Text pre-training: encoder, label prompter and text decoder against the
/// label masks.
pub fn run_phase1(cfg: &RunConfig) -> Result<RunRecord> {
    let ds = load_dataset(cfg)?;
    run_phase1_on(cfg, &ds)
}

pub fn run_phase1_on(cfg: &RunConfig, ds: &Dataset) -> Result<RunRecord> {
    cfg.validate()?;
    let dir = prepare_out(cfg)?;
    let (train, eval) = ds.split(cfg.data.eval_scenes)?;
    let p = &cfg.phase1;
    let mut model = Model::new(cfg, ds.dim)?;
    let params = model.phase1_params();
    model.train_only(&params);
    let mut opt = Optimizer::new(p.optimizer, params);
    let ckpt = dir.join(PHASE1_CKPT);
    save_checkpoint(&model.store, &ckpt)?;
    let start_sum = model.text_decoder_checksum();

    let mut metrics = JsonlWriter::create(&dir.join(METRICS_FILE))?;
    let mut timing = JsonlWriter::create(&dir.join(TIMING_FILE))?;
    let mut batches = Batcher::new(train, p, mix_seed(cfg.run.seed, PHASE1_SALT))?;
    let pixels = ds.height * ds.width;
    let hard = cfg.eval.hard_reprompt;
    let t0 = Instant::now();

    for step in 0..p.steps {
        let samples = batches.next();
        let g = Graph::new();
        let emb = model.encode(&g, &samples)?;
        let iters = usize::from(p.reprompt_training && step % 2 == 1);
        let out = model.real_text_path(&g, &emb, &samples, iters, hard)?;
        let target = g.constant(&mask_tensor(samples.iter().map(|s| s.scene.label_mask.as_slice()), pixels)?)?;
        let (ce, dice) = mask_losses(&g, out.logits, target, &cfg.losses)?;
        let loss = g.add(ce, dice)?;
        let lv = g.scalar(loss);
        check_finite(step, "loss", lv)?;
        let grads = g.backward(loss)?;
        model.store.accumulate(&grads)?;
        step_group(&mut model.store, &mut opt)?;

        let fields = BTreeMap::from([
            ("loss".to_string(), lv),
            ("ce".to_string(), g.scalar(ce)),
            ("dice".to_string(), g.scalar(dice)),
            ("reprompt".to_string(), iters as f64),
        ]);
        metrics.write(&StepRecord {
            step,
            phase: "pretrain_text".into(),
            fields,
        })?;
        timing.write(&TimingRecord {
            step,
            phase: "pretrain_text",
            seconds: t0.elapsed().as_secs_f64(),
        })?;
        if p.eval_interval > 0 && (step + 1) % p.eval_interval == 0 && step + 1 < p.steps {
            save_checkpoint(&model.store, &ckpt)?;
            let r = evaluate(&model, train, eval, &cfg.eval, None)?;
            log::info!("phase 1 step {}: real-text mIoU {:.4}", step + 1, r.miou_real_text);
            metrics.write(&StepRecord {
                step,
                phase: "eval".into(),
                fields: eval_fields(&r),
            })?;
        }
    }
    save_checkpoint(&model.store, &ckpt)?;
    let report = evaluate(&model, train, eval, &cfg.eval, None)?;
    write_report(&dir, "phase1_eval.json", &report)?;
    Ok(RunRecord {
        config: cfg.clone(),
        metrics: dir.join(METRICS_FILE),
        checkpoint: ckpt,
        out_dir: dir,
        steps: p.steps,
        text_decoder_checksum: (start_sum, model.text_decoder_checksum()),
        final_eval: report,
    })
}

/// Decoupling phase from a phase-1 checkpoint.
pub fn run_phase2(cfg: &RunConfig, phase1_ckpt: &Path) -> Result<RunRecord> {
    let ds = load_dataset(cfg)?;
    run_phase2_on(cfg, &ds, phase1_ckpt)
}

pub fn run_phase2_on(cfg: &RunConfig, ds: &Dataset, phase1_ckpt: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let mut model = Model::new(cfg, ds.dim)?;
    load_checkpoint(&mut model.store, phase1_ckpt)?;
    let dir = prepare_out(cfg)?;
    let (train, eval) = ds.split(cfg.data.eval_scenes)?;
    let p = &cfg.phase2;
    let w = &cfg.losses;
    let club = cfg.club_config();

    let main_params = model.phase2_params(cfg.model.freeze_image_encoder);
    let disc_params = model.disc_params();
    let q_params = model.q.params();
    let mut trainable = main_params.clone();
    trainable.extend(&disc_params);
    model.train_only(&trainable);
    let mut opt = Optimizer::new(p.optimizer, main_params);
    let mut disc_opt = Optimizer::new(cfg.adversary.optimizer, disc_params);
    let mut q_opt = Optimizer::new(OptimizerConfig::adam(club.lr), q_params.clone());

    let frozen = model.text_side_params();
    let frozen_before = model.store.checksum(&frozen);
    let start_sum = model.text_decoder_checksum();
    let ckpt = dir.join(PHASE2_CKPT);
    save_checkpoint(&model.store, &ckpt)?;

    let mut metrics = JsonlWriter::create(&dir.join(METRICS_FILE))?;
    let mut timing = JsonlWriter::create(&dir.join(TIMING_FILE))?;
    let mut batches = Batcher::new(train, p, mix_seed(cfg.run.seed, PHASE2_SALT))?;
    let pixels = ds.height * ds.width;
    let hard = cfg.eval.hard_reprompt;
    let t0 = Instant::now();

    for step in 0..p.steps {
        let samples = batches.next();
        let x = fused_states(&samples)?;
        let mut fields = BTreeMap::new();

        if w.lambda_club > 0.0 && alternate(&club, step as u64) == Phase::UpdateQ {
            let g = Graph::new();
            let (ht, hv) = model.decoupler.decouple(&g, &model.store, g.constant(&x)?)?;
            let (ht, hv) = (g.value(ht), g.value(hv));
            model.store.set_trainable(&q_params, true);
            let mut nll = 0.0;
            for _ in 0..club.q_steps {
                nll = fit_q_step(&mut model.store, &model.q, &mut q_opt, &ht, &hv)?;
            }
            model.store.set_trainable(&q_params, false);
            check_finite(step, "q_nll", nll)?;
            fields.insert("q_nll".to_string(), nll);
        }

        let g = Graph::new();
        let emb = model.encode(&g, &samples)?;
        let iters = usize::from(p.reprompt_training && step % 2 == 1);
        let b = model.branches(&g, &emb, g.constant(&x)?, iters, hard)?;
        let fused = fuse_masks(&g, &model.store, &model.gate, b.text.logits, b.visual.logits)?;
        let mut aux = AuxTerms::default();
        if w.lambda_adv > 0.0 {
            let (obj, stats) = adv_objective(
                &g,
                &model.store,
                b.h_text,
                b.h_vision,
                &model.d_text,
                &model.d_vision,
                w.lambda_adv,
                cfg.adversary.wiring,
            )?;
            aux.adv = Some((obj, stats.objective));
            fields.insert("adv_j".to_string(), stats.objective);
            fields.insert("adv_mean_dv_ht".to_string(), stats.mean_dv_ht);
            fields.insert("adv_mean_dt_hv".to_string(), stats.mean_dt_hv);
        }
        if w.lambda_club > 0.0 {
            aux.club = Some(club_estimate(&g, &model.store, &model.q, b.h_text, b.h_vision)?);
        }
        if w.lambda_ortho > 0.0 {
            let label = model.real_text_path(&g, &emb, &samples, 0, hard)?;
            aux.ortho = Some(ortho_loss(&g, label.mask_token, b.visual.mask_token)?);
        }
        let label_mask = g.constant(&mask_tensor(samples.iter().map(|s| s.scene.label_mask.as_slice()), pixels)?)?;
        let gt_mask = g.constant(&mask_tensor(samples.iter().map(|s| s.scene.target_mask()), pixels)?)?;
        let (obj, breakdown) = triple_supervision(
            &g,
            b.text.logits,
            b.visual.logits,
            fused,
            label_mask,
            gt_mask,
            aux,
            w,
        )?;
        check_finite(step, "objective", g.scalar(obj))?;
        let grads = g.backward(obj)?;
        model.store.accumulate(&grads)?;
        step_group(&mut model.store, &mut opt)?;
        if w.lambda_adv > 0.0 {
            step_group(&mut model.store, &mut disc_opt)?;
        } else {
            model.store.zero_grad();
        }

        let bd = serde_json::to_value(&breakdown).map_err(|e| Error::contract(format!("{e}")))?;
        if let serde_json::Value::Object(m) = bd {
            for (k, v) in m {
                fields.insert(k, v.as_f64().unwrap_or(f64::NAN));
            }
        }
        fields.insert("reprompt".to_string(), iters as f64);
        metrics.write(&StepRecord {
            step,
            phase: "train_decouple".into(),
            fields,
        })?;
        timing.write(&TimingRecord {
            step,
            phase: "train_decouple",
            seconds: t0.elapsed().as_secs_f64(),
        })?;
        if p.eval_interval > 0 && (step + 1) % p.eval_interval == 0 && step + 1 < p.steps {
            save_checkpoint(&model.store, &ckpt)?;
            let r = evaluate(&model, train, eval, &cfg.eval, None)?;
            log::info!(
                "phase 2 step {}: fused {:.4} text {:.4} visual {:.4}",
                step + 1,
                r.miou,
                r.miou_text,
                r.miou_visual
            );
            metrics.write(&StepRecord {
                step,
                phase: "eval".into(),
                fields: eval_fields(&r),
            })?;
        }
    }

    let frozen_after = model.store.checksum(&frozen);
    if frozen_after != frozen_before {
        return Err(Error::contract(format!(
            "frozen text-side parameters changed during phase 2 ({frozen_before:08x} -> {frozen_after:08x})"
        )));
    }
    save_checkpoint(&model.store, &ckpt)?;
    let report = evaluate(&model, train, eval, &cfg.eval, None)?;
    write_report(&dir, "phase2_eval.json", &report)?;
    Ok(RunRecord {
        config: cfg.clone(),
        metrics: dir.join(METRICS_FILE),
        checkpoint: ckpt,
        out_dir: dir,
        steps: p.steps,
        text_decoder_checksum: (start_sum, model.text_decoder_checksum()),
        final_eval: report,
    })
}

/// Loads a checkpoint into a model built from `cfg` and evaluates it.
pub fn evaluate_checkpoint(cfg: &RunConfig, ds: &Dataset, ckpt: &Path, dump: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::contract("evaluation on an empty dataset"));
    }
    let mut model = Model::new(cfg, ds.dim)?;
    load_checkpoint(&mut model.store, ckpt)?;
    let (train, eval) = ds.split(cfg.data.eval_scenes)?;
    evaluate(&model, train, eval, &cfg.eval, dump)
}
