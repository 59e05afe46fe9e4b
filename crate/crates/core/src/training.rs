//! Adversarial training: one discriminator step then one generator step per
//! batch, with per-pair gating of the reconstruction and feature-matching
//! terms, exact checkpoints and seeded sampling.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use ndarray::{s, Array3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState, TensorData};
use crate::config::{Gating, TrainConfig};
use crate::dataset::{sample_batch, Dataset, TrainingPair};
use crate::discriminators::{AppearanceDiscriminator, LandmarkDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{ForwardOptions, Generator, GeneratorInputs, GeneratorOutput};
use crate::imageio::save_png;
use crate::landmarks::{build_context_image, render_landmark_map, LandmarkSet, LandmarkSubset};
use crate::losses::{
    discriminator_loss, gated_mean, generator_adversarial_loss, recon_per_sample, wfm_per_sample, LossBundle,
    LossComponents, PairTerms, LOG_HEADER,
};
use crate::nn::{array3_from_tensor, batch_tensor, Init, ParamStore};
use crate::optim::Adam;
use crate::synthetic::{make_synthetic, SyntheticConfig};

pub const GENERATOR: &str = "generator";
pub const D_APP: &str = "d_app";
pub const D_LM: &str = "d_lm";

/// Network definitions plus the landmark preprocessing they expect.
#[derive(Debug, Clone)]
pub struct Model {
    pub generator: Generator,
    pub d_app: AppearanceDiscriminator,
    pub d_lm: LandmarkDiscriminator,
    pub subset: Option<LandmarkSubset>,
    pub sigma: f64,
}

impl Model {
    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let channels = cfg.landmark_count();
        Ok(Model {
            generator: Generator::new(cfg.generator.clone(), channels, cfg.landmark_attention)?,
            d_app: AppearanceDiscriminator::new(cfg.discriminator.clone())?,
            d_lm: LandmarkDiscriminator::new(cfg.discriminator.clone(), channels)?,
            subset: cfg.subset()?,
            sigma: cfg.sigma,
        })
    }

    pub fn landmark_channels(&self) -> usize {
        self.generator.landmark_channels
    }

    /// Fresh parameters for all three networks from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        init.scoped(GENERATOR, |i| self.generator.init(i))?;
        init.scoped(D_APP, |i| self.d_app.init(i))?;
        init.scoped(D_LM, |i| self.d_lm.init(i))?;
        Ok(store)
    }

    /// Subset selection followed by heatmap rendering.
    pub fn landmark_map(&self, lms: &LandmarkSet, size: (usize, usize)) -> Result<Array3<f64>> {
        let lms = match &self.subset {
            Some(s) => s.apply(lms)?,
            None => lms.clone(),
        };
        Ok(render_landmark_map(&lms, size, self.sigma)?.data)
    }

    pub fn assemble(&self, pairs: &[TrainingPair]) -> Result<Batch> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let shape = pairs[0].source_image.shape();
        let size = (shape[1], shape[2]);
        let mut ctx = Vec::with_capacity(pairs.len());
        let mut ctx_mask = Vec::with_capacity(pairs.len());
        let mut lm_s = Vec::with_capacity(pairs.len());
        let mut lm_c = Vec::with_capacity(pairs.len());
        let mut h = Sha256::new();
        for p in pairs {
            for img in [&p.source_image, &p.condition_image] {
                if img.shape() != shape {
                    return Err(Error::shape(format!("batch mixes shapes {:?} and {:?}", shape, img.shape())));
                }
                for v in img.iter() {
                    h.update(v.to_le_bytes());
                }
            }
            let c = build_context_image(&p.source_image, &p.source_landmarks)?;
            ctx.push(c.data);
            ctx_mask.push(c.mask);
            lm_s.push(self.landmark_map(&p.source_landmarks, size)?);
            lm_c.push(self.landmark_map(&p.condition_landmarks, size)?);
        }
        Ok(Batch {
            source: batch_tensor(pairs.iter().map(|p| &p.source_image))?,
            inputs: GeneratorInputs {
                condition: batch_tensor(pairs.iter().map(|p| &p.condition_image))?,
                context: batch_tensor(&ctx)?,
                context_mask: batch_tensor(&ctx_mask)?,
                lm_source: batch_tensor(&lm_s)?,
                lm_condition: batch_tensor(&lm_c)?,
            },
            same_identity: pairs.iter().map(|p| p.same_identity).collect(),
            hash: hex::encode(h.finalize()),
        })
    }

    pub fn generate(&self, params: &ParamStore, inputs: &GeneratorInputs, opts: &ForwardOptions) -> Result<GeneratorOutput> {
        self.generator.forward(&params.view(GENERATOR), inputs, opts)
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub source: Tensor,
    pub inputs: GeneratorInputs,
    pub same_identity: Vec<bool>,
    /// SHA-256 of the source and condition pixels, for diagnostics.
    pub hash: String,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBundle,
    pub same_identity: Vec<bool>,
    pub recon_gates: Vec<bool>,
    pub wfm_gates: Vec<bool>,
}

pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Re-hash the parameter trees around each update and fail if an
    /// optimizer touched the other side.
    pub verify_isolation: bool,
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 of the same seed drives parameter init
    rng.set_stream(1);
    rng
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::from_config(&config)?;
        let params = model.init_params(config.seed)?;
        Ok(TrainState {
            opt_g: Adam::new(config.beta1, config.beta2),
            opt_d: Adam::new(config.beta1, config.beta2),
            rng: training_rng(config.seed),
            step: 0,
            model,
            params,
            config,
            verify_isolation: false,
        })
    }

    /// Draws the next batch and trains on it.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepReport> {
        let fraction = match self.config.gating {
            Gating::PerPair => self.config.same_pair_fraction,
            Gating::Alternating => {
                if self.rng.gen_bool(self.config.same_pair_fraction) {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let batch_seed = self.rng.next_u64();
        let pairs = sample_batch(dataset, self.config.batch_size, fraction, batch_seed)?;
        self.train_on_pairs(&pairs)
    }

    pub fn train_on_pairs(&mut self, pairs: &[TrainingPair]) -> Result<StepReport> {
        let batch = self.model.assemble(pairs)?;
        self.train_on_batch(&batch)
    }

    pub fn train_on_batch(&mut self, batch: &Batch) -> Result<StepReport> {
        let step = self.step + 1;
        let cfg = &self.config;
        let kind = cfg.gan_loss;
        let w = cfg.loss_weights;
        let condition = &batch.inputs.condition;
        let non_finite = |term: &str| Error::NonFiniteLoss {
            step,
            term: term.to_string(),
            batch_hash: batch.hash.clone(),
        };

        // (1) generator forward
        let out = self.model.generate(&self.params, &batch.inputs, &ForwardOptions::default())?;
        let generated = &out.final_image;

        // (2) discriminator update on the detached output
        let g_hash = self.hash_if_verifying(GENERATOR)?;
        let fake = generated.detach();
        let d_app_w = self.params.view(D_APP);
        let d_lm_w = self.params.view(D_LM);
        let app_real = self.model.d_app.forward(&d_app_w, &batch.source, condition)?;
        let app_fake = self.model.d_app.forward(&d_app_w, &fake, condition)?;
        let lm_real = self.model.d_lm.forward(&d_lm_w, &batch.source, &batch.inputs.lm_source)?;
        let lm_fake = self.model.d_lm.forward(&d_lm_w, &fake, &batch.inputs.lm_source)?;
        let app_d = discriminator_loss(&app_real.score, &app_fake.score, kind)?;
        let lm_d = discriminator_loss(&lm_real.score, &lm_fake.score, kind)?;
        let loss_d = ((&app_d * w.app)? + (&lm_d * w.lm)?)?;
        let (app_d, lm_d) = (scalar(&app_d)?, scalar(&lm_d)?);
        for (name, v) in [("app_d", app_d), ("lm_d", lm_d)] {
            if !v.is_finite() {
                return Err(non_finite(name));
            }
        }
        let grads = loss_d.backward()?;
        self.opt_d.step(&self.params, &[D_APP, D_LM], &grads, cfg.lr_discriminators)?;
        drop(grads);
        self.check_unchanged(GENERATOR, g_hash, "discriminator")?;

        // (3) generator update against the updated, frozen discriminators
        let d_hash = self.hash_if_verifying("d")?;
        let app_fw = self.params.frozen_view(D_APP);
        let lm_fw = self.params.frozen_view(D_LM);
        let app_g_out = self.model.d_app.forward(&app_fw, generated, condition)?;
        let lm_g_out = self.model.d_lm.forward(&lm_fw, generated, &batch.inputs.lm_source)?;
        let app_g = generator_adversarial_loss(&app_g_out.score, kind)?;
        let lm_g = generator_adversarial_loss(&lm_g_out.score, kind)?;

        let gates: Vec<PairTerms> = batch
            .same_identity
            .iter()
            .map(|&same| PairTerms::for_pair(same, cfg.context_matching))
            .collect();
        let recon_gates: Vec<bool> = gates.iter().map(|g| g.recon).collect();
        let wfm_gates: Vec<bool> = gates.iter().map(|g| g.wfm).collect();
        let recon = gated_mean(&recon_per_sample(generated, &batch.source)?, &recon_gates)?;
        let wfm = if wfm_gates.iter().any(|&g| g) {
            let real_feats = self.model.d_app.forward(&app_fw, &batch.source, condition)?;
            gated_mean(
                &wfm_per_sample(&app_g_out.features, &real_feats.features, cfg.wfm_start_layer)?,
                &wfm_gates,
            )?
        } else {
            Tensor::new(0.0f64, &crate::nn::DEVICE)?
        };
        let loss_g = ((((&app_g * w.app)? + (&lm_g * w.lm)?)? + (&wfm * w.wfm)?)? + (&recon * w.recon)?)?;

        let components = LossComponents {
            app_g: scalar(&app_g)?,
            app_d,
            lm_g: scalar(&lm_g)?,
            lm_d,
            wfm: scalar(&wfm)?,
            recon: scalar(&recon)?,
        };
        let active = PairTerms {
            recon: recon_gates.iter().any(|&g| g),
            wfm: wfm_gates.iter().any(|&g| g),
        };
        let losses = LossBundle::new(&components, &w, active)?;
        if let Some(term) = losses.first_non_finite() {
            return Err(non_finite(term));
        }
        let grads = loss_g.backward()?;
        self.opt_g.step(&self.params, &[GENERATOR], &grads, cfg.lr_generator)?;
        self.check_unchanged("d", d_hash, "generator")?;

        self.step = step;
        Ok(StepReport {
            step,
            losses,
            same_identity: batch.same_identity.clone(),
            recon_gates,
            wfm_gates,
        })
    }

    fn hash_if_verifying(&self, which: &str) -> Result<Option<String>> {
        if !self.verify_isolation {
            return Ok(None);
        }
        Ok(Some(match which {
            GENERATOR => self.params.digest(GENERATOR)?,
            _ => format!("{}{}", self.params.digest(D_APP)?, self.params.digest(D_LM)?),
        }))
    }

    fn check_unchanged(&self, which: &str, before: Option<String>, by: &str) -> Result<()> {
        if let Some(before) = before {
            if self.hash_if_verifying(which)? != Some(before) {
                return Err(Error::Checkpoint(format!("{by} update modified `{which}` parameters")));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = std::collections::BTreeMap::new();
        for (name, var) in self.params.iter() {
            tensors.insert(
                format!("param/{name}"),
                TensorData {
                    dims: var.dims().to_vec(),
                    values: self.params.values(name)?,
                },
            );
        }
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            for (kind, map) in [("m", &opt.m), ("v", &opt.v)] {
                for (name, values) in map {
                    let dims = self
                        .params
                        .var(name)
                        .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown `{name}`")))?
                        .dims()
                        .to_vec();
                    tensors.insert(
                        format!("{tag}.{kind}/{name}"),
                        TensorData {
                            dims,
                            values: values.clone(),
                        },
                    );
                }
            }
        }
        Ok(Checkpoint {
            config_hash: self.config.hash()?,
            config_toml: self.config.to_toml()?,
            step: self.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos(),
            },
            adam_g_t: self.opt_g.t,
            adam_d_t: self.opt_d.t,
            tensors,
        })
    }

    /// Restores a state. With `expected`, its hash must match the
    /// checkpoint's and it replaces the stored config (so the step budget
    /// may change).
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&TrainConfig>) -> Result<Self> {
        let stored = TrainConfig::from_toml(&ckpt.config_toml, Path::new("<checkpoint>"))?;
        if stored.hash()? != ckpt.config_hash {
            return Err(Error::Checkpoint("embedded config does not match its hash".into()));
        }
        let config = match expected {
            Some(cfg) => {
                let h = cfg.hash()?;
                if h != ckpt.config_hash {
                    return Err(Error::Checkpoint(format!(
                        "config hash mismatch: checkpoint {} vs config {h}",
                        ckpt.config_hash
                    )));
                }
                cfg.clone()
            }
            None => stored,
        };
        let mut state = TrainState::new(config)?;
        let mut seen = 0;
        for (key, t) in &ckpt.tensors {
            let (ns, name) = key
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{key}` has no namespace")))?;
            let var = state
                .params
                .var(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            if var.dims() != t.dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{key}` has dims {:?}, model expects {:?}",
                    t.dims,
                    var.dims()
                )));
            }
            match ns {
                "param" => {
                    state.params.set_values(name, &t.values)?;
                    seen += 1;
                }
                "adam_g.m" => drop(state.opt_g.m.insert(name.into(), t.values.clone())),
                "adam_g.v" => drop(state.opt_g.v.insert(name.into(), t.values.clone())),
                "adam_d.m" => drop(state.opt_d.m.insert(name.into(), t.values.clone())),
                "adam_d.v" => drop(state.opt_d.v.insert(name.into(), t.values.clone())),
                other => return Err(Error::Checkpoint(format!("unknown namespace `{other}`"))),
            }
        }
        if seen != state.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                state.params.len()
            )));
        }
        state.opt_g.t = ckpt.adam_g_t;
        state.opt_d.t = ckpt.adam_d_t;
        state.step = ckpt.step;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        state.rng = rng;
        Ok(state)
    }
}

/// Loads the dataset a config points at. Relative manifest paths resolve
/// against `base`.
pub fn load_dataset(cfg: &TrainConfig, base: &Path) -> Result<Dataset> {
    let ds = match (&cfg.dataset.manifest, &cfg.dataset.synthetic) {
        (Some(m), None) => Dataset::load_manifest(&base.join(m))?,
        (None, Some(s)) => make_synthetic(&SyntheticConfig {
            identities: s.identities,
            images_per_identity: s.images_per_identity,
            resolution: cfg.resolution,
            seed: s.seed,
        })?,
        (None, None) => return Err(Error::Config("dataset needs `manifest` or `synthetic`".into())),
        (Some(_), Some(_)) => return Err(Error::Config("dataset sets both `manifest` and `synthetic`".into())),
    };
    if ds.resolution() != (cfg.resolution, cfg.resolution) {
        return Err(Error::Dataset(format!(
            "dataset resolution {:?} differs from config resolution {}",
            ds.resolution(),
            cfg.resolution
        )));
    }
    Ok(ds)
}

#[derive(Debug)]
pub struct FitSummary {
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

/// Runs until `config.steps` steps are complete, writing `losses.csv`,
/// periodic `checkpoint_<step>.ckpt` files and `samples_<step>.png` grids to
/// `out_dir`, and `final.ckpt` at the end.
pub fn fit(config: &TrainConfig, dataset: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<FitSummary> {
    fit_with(config, dataset, out_dir, resume, |_| {})
}

/// [`fit`] with a callback after every step.
pub fn fit_with(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<FitSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut state = match resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?, Some(config))?,
        None => TrainState::new(config.clone())?,
    };
    let log = out_dir.join("losses.csv");
    let fresh = resume.is_none() || !log.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log)?;
    if fresh {
        writeln!(file, "{LOG_HEADER}")?;
    }
    let mut reports = Vec::new();
    while state.step < config.steps {
        let report = state.train_step(dataset)?;
        writeln!(file, "{}", report.losses.log_row(report.step))?;
        on_step(&report);
        let step = report.step;
        reports.push(report);
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            state.to_checkpoint()?.save(&out_dir.join(format!("checkpoint_{step:06}.ckpt")))?;
        }
        if config.sample_every > 0 && step % config.sample_every == 0 {
            write_sample_grid(&state, dataset, &out_dir.join(format!("samples_{step:06}.png")))?;
        }
    }
    file.flush()?;
    let final_checkpoint = out_dir.join("final.ckpt");
    state.to_checkpoint()?.save(&final_checkpoint)?;
    Ok(FitSummary {
        reports,
        final_checkpoint,
        log,
    })
}

/// Rows of source | condition | output | attention mask for a fixed batch
/// drawn from the config seed, so grids from different steps line up.
pub fn write_sample_grid(state: &TrainState, dataset: &Dataset, path: &Path) -> Result<()> {
    let n = state.config.batch_size.min(4);
    let fraction = if dataset.identities().len() < 2 { 1.0 } else { 0.5 };
    let pairs = sample_batch(dataset, n, fraction, state.config.seed)?;
    let batch = state.model.assemble(&pairs)?;
    let out = state.model.generate(&state.params, &batch.inputs, &ForwardOptions::default())?;
    let panels = [
        array_rows(&batch.source)?,
        array_rows(&batch.inputs.condition)?,
        array_rows(&out.final_image)?,
        array_rows(&((out.attention_mask.repeat((1, 3, 1, 1))? * 2.0)? - 1.0)?)?,
    ];
    let (h, w) = (panels[0][0].shape()[1], panels[0][0].shape()[2]);
    let mut grid = Array3::<f64>::from_elem((3, n * (h + 1) - 1, 4 * (w + 1) - 1), 1.0);
    for (col, panel) in panels.iter().enumerate() {
        for (row, img) in panel.iter().enumerate() {
            let (r0, c0) = (row * (h + 1), col * (w + 1));
            grid.slice_mut(s![.., r0..r0 + h, c0..c0 + w]).assign(img);
        }
    }
    save_png(&grid, path)
}

fn array_rows(t: &Tensor) -> Result<Vec<Array3<f64>>> {
    (0..t.dim(0)?).map(|i| array3_from_tensor(&t.get(i)?)).collect()
}
