//! One training iteration and the state it updates.

use crate::autodiff::{adamw_step, AdamWState, ParamStore, Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{
    class_pseudo_loss, normalize_targets, patch_pseudo_loss, recon_loss, total_loss, LossReport, LossTerms,
    TARGET_EPS,
};
use crate::masking::{gather_fold_patches, gen_mask, split_folds, FoldSet, MaskSpec};
use crate::pseudo_label::{
    class_target_average, mean_row_entropy, nearest_patch_match, student_assign, teacher_targets, ClassTarget,
};
use crate::rng::{stream, tag};
use crate::teachers::{Clock, EmaFrequency, EmaSchedule, TeacherRole, TeacherState};
use crate::vit::{patchify, Decoder, EncodedTokens, Encoder, NoDrop, Patches, ProjectionHead, TokenBatch};

use super::checkpoint::Checkpoint;
use super::config::{TeacherMode, TrainConfig};
use super::schedule::lr_at;

/// Student networks and their parameters.
pub struct Student {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Option<ProjectionHead>,
    pub enc: ParamStore,
    pub dec: ParamStore,
    pub head_params: Option<ParamStore>,
}

impl Student {
    pub fn new(cfg: &TrainConfig, with_head: bool) -> Self {
        let (encoder, enc) = Encoder::new(&cfg.model, &mut stream(cfg.seed, &[tag::INIT_ENCODER]));
        let (decoder, dec) = Decoder::new(&cfg.model, &mut stream(cfg.seed, &[tag::INIT_DECODER]));
        let (head, head_params) = if with_head {
            let (h, p) = ProjectionHead::new(&cfg.head, cfg.model.embed_dim, &mut stream(cfg.seed, &[tag::INIT_HEAD]));
            (Some(h), Some(p))
        } else {
            (None, None)
        };
        Self {
            encoder,
            decoder,
            head,
            enc,
            dec,
            head_params,
        }
    }
}

pub enum Teachers {
    Dual {
        rec: TeacherState,
        cl: Option<TeacherState>,
    },
    Single(TeacherState),
}

impl Teachers {
    pub fn rec_encoder(&self) -> &ParamStore {
        match self {
            Teachers::Dual { rec, .. } => &rec.encoder,
            Teachers::Single(t) => &t.encoder,
        }
    }

    /// Encoder and head parameters of the pseudo-labelling teacher.
    pub fn cl(&self) -> Option<(&ParamStore, &ParamStore)> {
        let t = match self {
            Teachers::Dual { cl, .. } => cl.as_ref()?,
            Teachers::Single(t) => t,
        };
        Some((&t.encoder, t.head.as_ref()?))
    }

    pub fn momenta(&self) -> (f64, f64) {
        match self {
            Teachers::Dual { rec, cl } => (rec.last_momentum, cl.as_ref().map_or(0.0, |c| c.last_momentum)),
            Teachers::Single(t) => (t.last_momentum, t.last_momentum),
        }
    }

    pub fn states(&self) -> Vec<(&'static str, &TeacherState)> {
        match self {
            Teachers::Dual { rec, cl } => {
                let mut v = vec![("teacher.rec", rec)];
                v.extend(cl.as_ref().map(|c| ("teacher.cl", c)));
                v
            }
            Teachers::Single(t) => vec![("teacher.single", t)],
        }
    }

    fn states_mut(&mut self) -> Vec<(&'static str, &mut TeacherState)> {
        match self {
            Teachers::Dual { rec, cl } => {
                let mut v = vec![("teacher.rec", rec)];
                v.extend(cl.as_mut().map(|c| ("teacher.cl", c)));
                v
            }
            Teachers::Single(t) => vec![("teacher.single", t)],
        }
    }
}

/// Iteration layout of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunShape {
    pub records: usize,
    pub iters_per_epoch: u64,
    pub total_iters: u64,
    pub epochs: u64,
    pub warmup_iters: u64,
}

impl RunShape {
    pub fn new(cfg: &TrainConfig, records: usize) -> Result<Self> {
        let b = cfg.optim.batch_size;
        if b > records {
            return Err(Error::config(format!("batch size {b} exceeds the {records} training records")));
        }
        let ipe = (records / b) as u64;
        let full = ipe * cfg.optim.epochs;
        let total_iters = cfg.optim.max_iters.map_or(full, |m| m.min(full));
        Ok(Self {
            records,
            iters_per_epoch: ipe,
            total_iters,
            epochs: total_iters.div_ceil(ipe),
            warmup_iters: cfg.optim.warmup_epochs * ipe,
        })
    }

    /// Updates a teacher with `schedule` performs over the run, minus one:
    /// the index at which the schedule reaches its end value.
    pub fn schedule_length(&self, schedule: &EmaSchedule) -> u64 {
        match schedule.frequency {
            EmaFrequency::PerIteration => self.total_iters.saturating_sub(1),
            EmaFrequency::PerEpoch => self.epochs.saturating_sub(1),
        }
    }
}

/// Full mutable state of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub shape: RunShape,
    pub student: Student,
    pub teachers: Teachers,
    pub opt_enc: AdamWState,
    pub opt_dec: AdamWState,
    pub opt_head: Option<AdamWState>,
    /// Iterations completed.
    pub global_iter: u64,
    /// Epochs completed.
    pub epochs_done: u64,
}

/// What one iteration produced.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f32,
    pub rec_updated: bool,
    pub cl_updated: bool,
}

impl Trainer {
    /// Builds a run for `records` training images. Without the pseudo-label
    /// branch no projection head and no pseudo-labelling teacher exist.
    pub fn new(cfg: &TrainConfig, records: usize, with_pseudo_branch: bool) -> Result<Self> {
        cfg.validate()?;
        if !with_pseudo_branch && cfg.loss.uses_pseudo_labels() {
            return Err(Error::config("pseudo-label losses need the pseudo-label branch"));
        }
        let shape = RunShape::new(cfg, records)?;
        let student = Student::new(cfg, with_pseudo_branch);
        let teacher = |role, with_head: bool, schedule: &EmaSchedule| {
            TeacherState::from_student(
                role,
                &student.enc,
                if with_head { student.head_params.as_ref() } else { None },
                schedule.clone(),
                shape.schedule_length(schedule),
            )
        };
        let teachers = match cfg.teachers.mode {
            TeacherMode::Dual => Teachers::Dual {
                rec: teacher(TeacherRole::Reconstruction, false, &cfg.teachers.reconstruction),
                cl: with_pseudo_branch.then(|| teacher(TeacherRole::PseudoLabeling, true, &cfg.teachers.pseudo_labeling)),
            },
            TeacherMode::Single => Teachers::Single(teacher(TeacherRole::Both, with_pseudo_branch, &cfg.teachers.single)),
        };
        let o = &cfg.optim;
        let opt = |s: &ParamStore| AdamWState::new(s, 0.0, o.weight_decay).with_betas(o.beta1, o.beta2);
        Ok(Self {
            opt_enc: opt(&student.enc),
            opt_dec: opt(&student.dec),
            opt_head: student.head_params.as_ref().map(opt),
            cfg: cfg.clone(),
            shape,
            student,
            teachers,
            global_iter: 0,
            epochs_done: 0,
        })
    }

    pub fn has_pseudo_branch(&self) -> bool {
        self.student.head.is_some()
    }

    pub fn lr_for(&self, iter: u64) -> f32 {
        lr_at(iter, self.shape.warmup_iters, self.shape.total_iters, self.cfg.optim.lr)
    }

    /// Mask and folds of image `i` at iteration `iter`.
    pub fn masks_for(&self, iter: u64, batch: usize) -> Result<Vec<(MaskSpec, FoldSet)>> {
        let n = self.cfg.model.num_patches();
        (0..batch)
            .map(|i| {
                let mut rng = stream(self.cfg.seed, &[tag::MASK, iter, i as u64]);
                let mask = gen_mask(n, self.cfg.masking.ratio, &mut rng)?;
                let folds = split_folds(&mask, self.cfg.masking.folds, &mut rng)?;
                Ok((mask, folds))
            })
            .collect()
    }

    /// Builds the student loss graph of the current iteration on `batch`.
    /// Teacher targets enter the graph as constants.
    pub fn forward_loss(&self, batch: &Batch) -> Result<(Tape, Var, LossReport)> {
        let iter = self.global_iter;
        let cfg = &self.cfg;
        let model = &cfg.model;
        let (n, d, b) = (model.num_patches(), model.embed_dim, batch.len());
        let p = model.patch_size;
        let simple: Vec<Patches> = batch.views.iter().map(|v| patchify(&v.simple, p)).collect::<Result<_>>()?;
        let mf = self.masks_for(iter, b)?;
        let masks: Vec<MaskSpec> = mf.iter().map(|(m, _)| m.clone()).collect();
        let folds: Vec<FoldSet> = mf.into_iter().map(|(_, f)| f).collect();

        // student: visible simple-view tokens through encoder and decoder
        let visible = masks[0].visible.len();
        let mut data = Vec::with_capacity(b * visible * model.patch_dim());
        let mut positions = Vec::with_capacity(b * visible);
        for (pt, m) in simple.iter().zip(&masks) {
            data.extend(gather_fold_patches(pt, &m.visible)?);
            positions.extend_from_slice(&m.visible);
        }
        let tokens = TokenBatch::new(b, visible, model.patch_dim(), data, positions)?;
        let mut tape = Tape::new();
        let mut drop_rng = stream(cfg.seed, &[tag::DROP_PATH, iter]);
        let encoded = self.student.encoder.forward(&mut tape, &self.student.enc, &tokens, Some(&mut drop_rng))?;
        let dec_out = self.student.decoder.forward(&mut tape, &self.student.dec, &encoded, &masks)?;

        let mut terms = LossTerms::default();
        if cfg.loss.lambda_m != 0.0 {
            let mut t = Tape::no_grad();
            let enc_t = encode_folds(&mut t, &self.student.encoder, self.teachers.rec_encoder(), &simple, &folds)?;
            let targets = normalize_targets(&patch_values(&t, &enc_t), d, TARGET_EPS);
            terms.recon = Some(recon_loss(&mut tape, dec_out, &targets, &masks, &folds)?);
        }

        let mut entropies = (0.0, 0.0);
        if cfg.loss.uses_pseudo_labels() {
            let (cl_enc, cl_head) = self
                .teachers
                .cl()
                .ok_or_else(|| Error::contract("pseudo-label losses without a pseudo-labelling teacher"))?;
            let head = self.student.head.as_ref().expect("pseudo branch has a head");
            let head_params = self.student.head_params.as_ref().expect("pseudo branch has head params");
            let complex: Vec<Patches> = batch
                .views
                .iter()
                .map(|v| {
                    let img = v.complex.as_ref().ok_or_else(|| Error::contract("batch lacks complex views"))?;
                    patchify(img, p)
                })
                .collect::<Result<_>>()?;
            let cl_folds: Vec<FoldSet> = if cfg.multifold_pseudo_labeling {
                folds.clone()
            } else {
                masks.iter().map(|m| FoldSet { folds: vec![m.masked.clone()] }).collect()
            };
            let kc = cl_folds[0].k();
            let f = cl_folds[0].fold_len();
            let k_c = cfg.head.output_dim;

            let mut t = Tape::no_grad();
            let enc_t = encode_folds(&mut t, &self.student.encoder, cl_enc, &complex, &cl_folds)?;
            let teacher_feats = patch_values(&t, &enc_t);
            let assign = teacher_targets(&mut t, head, cl_head, &enc_t, kc, &cfg.pseudo)?;
            entropies = (
                assign.iter().map(|a| mean_row_entropy(&a.patch, k_c)).sum::<f64>() / kc as f64,
                assign.iter().map(|a| mean_row_entropy(&a.class, k_c)).sum::<f64>() / kc as f64,
            );

            let seq = n + 1;
            let class_rows: Vec<usize> = (0..b).map(|i| i * seq).collect();
            let masked_rows: Vec<usize> = masks
                .iter()
                .enumerate()
                .flat_map(|(i, m)| m.masked.iter().map(move |&q| i * seq + 1 + q))
                .collect();
            let want_c = cfg.loss.lambda_c != 0.0;
            let want_p = cfg.loss.lambda_p != 0.0;
            let cls = if want_c { Some(tape.index_rows(dec_out, &class_rows)?) } else { None };
            let pat = if want_p { Some(tape.index_rows(dec_out, &masked_rows)?) } else { None };
            let (c_scores, p_scores, _) = head.forward_rows(&mut tape, head_params, cls, pat)?;

            if let Some(scores) = p_scores {
                let dec_vals = tape.value(dec_out);
                let per_image = masks[0].masked.len();
                let mut matched = Vec::with_capacity(b * per_image * k_c);
                for i in 0..b {
                    let student_rows: Vec<f32> = masked_rows[i * per_image..(i + 1) * per_image]
                        .iter()
                        .flat_map(|&r| dec_vals[r * d..(r + 1) * d].iter().copied())
                        .collect();
                    let teacher_rows: Vec<&[f32]> = (0..kc)
                        .map(|k| &teacher_feats[(i * kc + k) * f * d..(i * kc + k + 1) * f * d])
                        .collect();
                    let m = nearest_patch_match(&student_rows, &teacher_rows, d)?;
                    for &(k, r) in &m.chosen {
                        let row = (i * f + r) * k_c;
                        matched.extend_from_slice(&assign[k].patch[row..row + k_c]);
                    }
                }
                let q = student_assign(&mut tape, scores, cfg.pseudo.student_temp);
                terms.patch = Some(patch_pseudo_loss(&mut tape, q, &matched)?);
            }
            if let Some(scores) = c_scores {
                let q = student_assign(&mut tape, scores, cfg.pseudo.student_temp);
                terms.class = Some(match cfg.pseudo.class_target {
                    ClassTarget::FoldAverage => {
                        let per_fold: Vec<&[f32]> = assign.iter().map(|a| a.class.as_slice()).collect();
                        class_pseudo_loss(&mut tape, q, &class_target_average(&per_fold)?)?
                    }
                    ClassTarget::PerFold => {
                        let mut acc = None;
                        for a in &assign {
                            let l = class_pseudo_loss(&mut tape, q, &a.class)?;
                            acc = Some(match acc {
                                None => l,
                                Some(s) => tape.add(s, l)?,
                            });
                        }
                        tape.scale(acc.expect("at least one fold"), 1.0 / kc as f32)
                    }
                });
            }
        }

        let (total, mut report) = total_loss(&mut tape, terms, &cfg.loss)?;
        report.patch_entropy = entropies.0;
        report.class_entropy = entropies.1;
        Ok((tape, total, report))
    }

    /// Runs one iteration on `batch` and advances every counter.
    pub fn step(&mut self, batch: &Batch, epoch: u64, end_of_epoch: bool) -> Result<StepOutcome> {
        let iter = self.global_iter;
        let (tape, total, report) = self.forward_loss(batch)?;
        let grads = tape.backward(total)?;

        let lr = self.lr_for(iter);
        step_if_bound(&tape, &grads, &mut self.student.enc, &mut self.opt_enc, lr)?;
        step_if_bound(&tape, &grads, &mut self.student.dec, &mut self.opt_dec, lr)?;
        if let (Some(store), Some(opt)) = (self.student.head_params.as_mut(), self.opt_head.as_mut()) {
            step_if_bound(&tape, &grads, store, opt, lr)?;
        }
        drop(tape);

        let clock = Clock {
            iteration: iter,
            epoch,
            end_of_epoch,
        };
        let (enc, head) = (&self.student.enc, self.student.head_params.as_ref());
        let mut fired = (false, false);
        for (name, t) in self.teachers.states_mut() {
            let with_head = if t.head.is_some() { head } else { None };
            let u = t.maybe_update(enc, with_head, clock)?;
            match name {
                "teacher.rec" => fired.0 = u,
                "teacher.cl" => fired.1 = u,
                _ => fired = (u, u),
            }
            debug_assert!(t.all_frozen());
        }
        self.global_iter += 1;
        if end_of_epoch {
            self.epochs_done = epoch + 1;
        }
        Ok(StepOutcome {
            report,
            lr,
            rec_updated: fired.0,
            cl_updated: fired.1,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            config: self.cfg.to_toml(),
            counters: vec![
                ("global_iter".into(), self.global_iter),
                ("epochs_done".into(), self.epochs_done),
            ],
            ..Default::default()
        };
        ck.push_store("student.encoder", &self.student.enc);
        ck.push_store("student.decoder", &self.student.dec);
        if let Some(h) = &self.student.head_params {
            ck.push_store("student.head", h);
        }
        ck.push_optimizer("optim.encoder", &self.student.enc, &self.opt_enc);
        ck.push_optimizer("optim.decoder", &self.student.dec, &self.opt_dec);
        if let (Some(h), Some(o)) = (&self.student.head_params, &self.opt_head) {
            ck.push_optimizer("optim.head", h, o);
        }
        for (name, t) in self.teachers.states() {
            ck.counters.push((format!("{name}/updates"), t.updates));
            ck.scalars.push((format!("{name}/last_momentum"), t.last_momentum));
            ck.push_store(&format!("{name}.encoder"), &t.encoder);
            if let Some(h) = &t.head {
                ck.push_store(&format!("{name}.head"), h);
            }
        }
        ck
    }

    /// Rebuilds a trainer from a checkpoint written by
    /// [`Trainer::to_checkpoint`] for a dataset of `records` images.
    pub fn from_checkpoint(ck: &Checkpoint, records: usize) -> Result<Self> {
        let cfg = TrainConfig::from_toml(&ck.config)?;
        let with_head = ck.has_prefix("student.head/");
        let mut tr = Self::new(&cfg, records, with_head)?;
        ck.restore_store("student.encoder", &mut tr.student.enc)?;
        ck.restore_store("student.decoder", &mut tr.student.dec)?;
        ck.restore_optimizer("optim.encoder", &tr.student.enc, &mut tr.opt_enc)?;
        ck.restore_optimizer("optim.decoder", &tr.student.dec, &mut tr.opt_dec)?;
        if let (Some(h), Some(o)) = (tr.student.head_params.as_mut(), tr.opt_head.as_mut()) {
            ck.restore_store("student.head", h)?;
            ck.restore_optimizer("optim.head", h, o)?;
        }
        for (name, t) in tr.teachers.states_mut() {
            t.updates = ck.counter(&format!("{name}/updates"))?;
            t.last_momentum = ck.scalar(&format!("{name}/last_momentum"))?;
            ck.restore_store(&format!("{name}.encoder"), &mut t.encoder)?;
            if let Some(h) = t.head.as_mut() {
                ck.restore_store(&format!("{name}.head"), h)?;
            }
        }
        tr.global_iter = ck.counter("global_iter")?;
        tr.epochs_done = ck.counter("epochs_done")?;
        Ok(tr)
    }
}

fn step_if_bound(
    tape: &Tape,
    grads: &crate::autodiff::Gradients,
    store: &mut ParamStore,
    opt: &mut AdamWState,
    lr: f32,
) -> Result<()> {
    if !tape.binds_store(store) {
        return Ok(());
    }
    tape.write_grads(grads, store);
    opt.lr = lr;
    adamw_step(store, opt)
}

/// Encodes fold `k` of image `i` as sequence `i * K + k`, without drop path.
pub fn encode_folds(
    tape: &mut Tape,
    encoder: &Encoder,
    params: &ParamStore,
    patches: &[Patches],
    folds: &[FoldSet],
) -> Result<EncodedTokens> {
    let k = folds[0].k();
    let f = folds[0].fold_len();
    let dim = patches[0].dim;
    let mut data = Vec::with_capacity(patches.len() * k * f * dim);
    let mut positions = Vec::with_capacity(patches.len() * k * f);
    for (pt, fs) in patches.iter().zip(folds) {
        for fold in &fs.folds {
            data.extend(gather_fold_patches(pt, fold)?);
            positions.extend_from_slice(fold);
        }
    }
    let tb = TokenBatch::new(patches.len() * k, f, dim, data, positions)?;
    encoder.forward(tape, params, &tb, None::<&mut NoDrop>)
}

/// Patch rows (class rows removed) of every sequence, in order.
pub fn patch_values(tape: &Tape, enc: &EncodedTokens) -> Vec<f32> {
    let v = tape.value(enc.tokens);
    let d = enc.dim;
    enc.patch_rows().iter().flat_map(|&r| v[r * d..(r + 1) * d].iter().copied()).collect()
}
