//! C ABI over `clasp-core`.
//!
//! Every function returns a [`ClaspStatus`]; on failure the message is kept
//! per thread and can be copied out with [`clasp_last_error_message`].
//! Trainers are opaque handles created by `clasp_trainer_new` or
//! `clasp_trainer_load` and released with `clasp_trainer_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use clasp_core::diagnostics::{conflict_ratio, expert_activation_divergence, harmonic_mean, GradientTrace};
use clasp_core::error::ClaspError;
use clasp_core::losses::{balancing_loss_stage, cv2};
use clasp_core::pc_moe::GateRecord;
use clasp_core::pseudo_labels::{select_attribute_label, select_part_label};
use clasp_core::trainer::{build_training_set, train_step, ModelState, TrainConfig, TrainingExample};
use clasp_core::workbench::checkpoint::{load_checkpoint, save_checkpoint};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaspStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checksum = 4,
    Structural = 5,
    Numeric = 6,
    Internal = 7,
}

/// Loss terms of one training step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClaspLoss {
    pub dino: f64,
    pub part: f64,
    pub attribute: f64,
    pub balancing: f64,
    pub total: f64,
}

/// Opaque trainer handle.
pub struct ClaspTrainer {
    cfg: TrainConfig,
    state: ModelState,
    data: Vec<TrainingExample>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &ClaspError) -> ClaspStatus {
    match e {
        ClaspError::Io(_) | ClaspError::Checkpoint { .. } | ClaspError::Format { .. } => ClaspStatus::Io,
        ClaspError::Checksum { .. } => ClaspStatus::Checksum,
        ClaspError::Structural(_) | ClaspError::Shape(_) => ClaspStatus::Structural,
        ClaspError::Numeric(_) => ClaspStatus::Numeric,
        ClaspError::Invariant(_) => ClaspStatus::Internal,
        _ => ClaspStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Core(ClaspError),
}

impl From<ClaspError> for Fail {
    fn from(e: ClaspError) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClaspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            ClaspStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            ClaspStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            ClaspStatus::InvalidArgument
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside clasp".into());
            ClaspStatus::Internal
        }
    }
}

unsafe fn input<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn clasp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Argmax over part similarity scores. `out_id` is 1-based.
///
/// # Safety
/// `scores` must hold `n` values; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn clasp_select_part_label(
    scores: *const f64,
    n: usize,
    out_id: *mut u8,
    out_score: *mut f64,
) -> ClaspStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let (id, score) = select_part_label(s)?;
        *out(out_id, "out_id")? = id;
        *out(out_score, "out_score")? = score;
        Ok(())
    })
}

/// Argmax over one attribute's label scores; `*out_index` is -1 when the
/// best score does not exceed `threshold`.
///
/// # Safety
/// `scores` must hold `n` values; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn clasp_select_attribute_label(
    scores: *const f64,
    n: usize,
    threshold: f64,
    out_index: *mut i64,
    out_score: *mut f64,
) -> ClaspStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        if s.is_empty() {
            return Err(Fail::Arg("no attribute scores".into()));
        }
        let (idx, score) = match select_attribute_label(s, threshold) {
            Some((i, v)) => (i as i64, v),
            None => (-1, s.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        };
        *out(out_index, "out_index")? = idx;
        *out(out_score, "out_score")? = score;
        Ok(())
    })
}

/// Squared coefficient of variation.
///
/// # Safety
/// `values` must hold `n` values; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_cv2(values: *const f64, n: usize, out_value: *mut f64) -> ClaspStatus {
    guard(|| {
        let v = input(values, n, "values")?;
        if v.is_empty() {
            return Err(Fail::Arg("cv2 of an empty vector".into()));
        }
        *out(out_value, "out_value")? = cv2(v);
        Ok(())
    })
}

/// Load-balancing loss of one stage from a row-major `[b, n]` gate matrix.
/// Nonzero entries count as selected.
///
/// # Safety
/// `gates` must hold `b * n` values; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_balancing_loss(gates: *const f64, b: usize, n: usize, out_value: *mut f64) -> ClaspStatus {
    guard(|| {
        let len = b.checked_mul(n).ok_or_else(|| Fail::Arg("b * n overflows".into()))?;
        let g = input(gates, len, "gates")?;
        let records: Vec<GateRecord> = g
            .chunks(n.max(1))
            .map(|row| GateRecord {
                task: 0,
                gates: row.to_vec(),
                selected: (0..row.len()).filter(|&j| row[j] != 0.0).collect(),
            })
            .collect();
        *out(out_value, "out_value")? = balancing_loss_stage(&records, b, n)?;
        Ok(())
    })
}

/// Gradient conflict ratio. `gradients` is `[tasks][layers][dim]`, row-major,
/// with every layer flattened to `dim` values.
///
/// # Safety
/// `gradients` must hold `tasks * layers * dim` values; `out_value` must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_conflict_ratio(
    gradients: *const f64,
    tasks: usize,
    layers: usize,
    dim: usize,
    out_value: *mut f64,
) -> ClaspStatus {
    guard(|| {
        let len = tasks
            .checked_mul(layers)
            .and_then(|x| x.checked_mul(dim))
            .ok_or_else(|| Fail::Arg("tasks * layers * dim overflows".into()))?;
        let g = input(gradients, len, "gradients")?;
        let trace = GradientTrace {
            tasks: (0..tasks).map(|t| format!("task{t}")).collect(),
            layers: (0..layers).map(|l| format!("layer{l}")).collect(),
            gradients: (0..tasks)
                .map(|t| (0..layers).map(|l| g[(t * layers + l) * dim..][..dim].to_vec()).collect())
                .collect(),
        };
        *out(out_value, "out_value")? = conflict_ratio(&trace)?;
        Ok(())
    })
}

/// Expert activation divergence between two length-`n` profiles.
///
/// # Safety
/// `p_i` and `p_j` must hold `n` values; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_expert_activation_divergence(
    p_i: *const f64,
    p_j: *const f64,
    n: usize,
    out_value: *mut f64,
) -> ClaspStatus {
    guard(|| {
        let a = input(p_i, n, "p_i")?;
        let b = input(p_j, n, "p_j")?;
        *out(out_value, "out_value")? = expert_activation_divergence(a, b, n)?;
        Ok(())
    })
}

/// # Safety
/// `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_harmonic_mean(a: f64, b: f64, out_value: *mut f64) -> ClaspStatus {
    guard(|| {
        *out(out_value, "out_value")? = harmonic_mean(a, b)?;
        Ok(())
    })
}

fn new_trainer(cfg: TrainConfig, state: ModelState) -> Result<*mut ClaspTrainer, Fail> {
    let data = build_training_set(&cfg)?;
    Ok(Box::into_raw(Box::new(ClaspTrainer { cfg, state, data })))
}

/// Creates a trainer from a JSON config (null for defaults).
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out_trainer` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_trainer_new(config_json: *const c_char, out_trainer: *mut *mut ClaspTrainer) -> ClaspStatus {
    guard(|| {
        let slot = out(out_trainer, "out_trainer")?;
        *slot = ptr::null_mut();
        let cfg = if config_json.is_null() {
            TrainConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail::Arg("config is not UTF-8".into()))?;
            TrainConfig::from_json(text)?
        };
        let state = ModelState::init(&cfg)?;
        *slot = new_trainer(cfg, state)?;
        Ok(())
    })
}

/// Restores a trainer from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_trainer` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_trainer_load(path: *const c_char, out_trainer: *mut *mut ClaspTrainer) -> ClaspStatus {
    guard(|| {
        let slot = out(out_trainer, "out_trainer")?;
        *slot = ptr::null_mut();
        let (state, cfg) = load_checkpoint(&path_arg(path)?)?;
        *slot = new_trainer(cfg, state)?;
        Ok(())
    })
}

/// Runs one optimization step at the scheduled learning rate.
///
/// # Safety
/// `trainer` must come from this library; `out_loss` may be null.
#[no_mangle]
pub unsafe extern "C" fn clasp_trainer_step(trainer: *mut ClaspTrainer, out_loss: *mut ClaspLoss) -> ClaspStatus {
    guard(|| {
        let t = out(trainer, "trainer")?;
        let i = t.state.step as usize;
        let lr = t.cfg.lr_at(i, t.cfg.steps.max(i + 1), t.cfg.lr);
        let eval = train_step(&mut t.state, &t.data, &t.cfg, &t.cfg.weights, lr, false)?;
        if let Some(o) = out_loss.as_mut() {
            let l = eval.loss;
            *o = ClaspLoss {
                dino: l.dino,
                part: l.part,
                attribute: l.attribute,
                balancing: l.balancing,
                total: l.total,
            };
        }
        Ok(())
    })
}

/// Number of completed steps.
///
/// # Safety
/// `trainer` must come from this library; `out_step` must be valid.
#[no_mangle]
pub unsafe extern "C" fn clasp_trainer_step_count(trainer: *const ClaspTrainer, out_step: *mut u64) -> ClaspStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or(Fail::Null("trainer"))?;
        *out(out_step, "out_step")? = t.state.step;
        Ok(())
    })
}

/// # Safety
/// `trainer` must come from this library; `path` must be a NUL-terminated
/// string.
#[no_mangle]
pub unsafe extern "C" fn clasp_trainer_save(trainer: *const ClaspTrainer, path: *const c_char) -> ClaspStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or(Fail::Null("trainer"))?;
        save_checkpoint(&t.state, &t.cfg, &path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a trainer. Null is ignored.
///
/// # Safety
/// `trainer` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn clasp_trainer_free(trainer: *mut ClaspTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
