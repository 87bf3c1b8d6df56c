//! C ABI over `esp-core`.
//!
//! Conventions:
//! - every fallible function returns an [`EspStatus`]; on failure the
//!   message is available from [`esp_last_error_message`] on the same thread;
//! - handles are opaque and owned by the caller, who frees them with the
//!   matching `*_free` function;
//! - strings returned through `char **` are freed with [`esp_string_free`];
//! - panics never cross the boundary (they become `ESP_STATUS_PANIC`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use esp_core::envs::make_env;
use esp_core::game::{
    check_reward_invariance, check_transition_equivariance, EnvState, Environment, JointAction, SymmetrySpec,
};
use esp_core::group::{check_group_axioms, group_by_name, Group};
use esp_core::harness::{evaluate_checkpoint, train, verify, ExperimentConfig, VerifyOptions};
use esp_core::layout::{Action, ActionLayout};
use esp_core::EspError;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EspStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Numerical = 4,
    Checkpoint = 5,
    Io = 6,
    Unsupported = 7,
    NonConvergence = 8,
    BufferTooSmall = 9,
    /// The checks ran and at least one failed.
    CheckFailed = 10,
    Panic = 99,
}

/// An environment together with its current episode state.
pub struct EspEnv {
    env: Box<dyn Environment>,
    state: Option<EnvState>,
}

/// A finite planar symmetry group.
pub struct EspGroup {
    group: Group,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &EspError) -> EspStatus {
    match e {
        EspError::InvalidArgument(_) | EspError::LayoutMismatch { .. } => EspStatus::InvalidArgument,
        EspError::UnsupportedCheck(_) => EspStatus::Unsupported,
        EspError::NonConvergence { .. } => EspStatus::NonConvergence,
        EspError::Numerical(_) => EspStatus::Numerical,
        EspError::Config { .. } => EspStatus::Config,
        EspError::Checkpoint(_) => EspStatus::Checkpoint,
        EspError::Environment { source, .. } => status_of(source),
        EspError::Io(_) => EspStatus::Io,
    }
}

fn fail(status: EspStatus, msg: impl Into<String>) -> EspStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<EspStatus, (EspStatus, String)>) -> EspStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err((status, msg))) => fail(status, msg),
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(EspStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn from_core(e: EspError) -> (EspStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EspStatus, String) {
    (EspStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (EspStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (EspStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (EspStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (EspStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn string_out(s: String, out: &mut *mut c_char) -> Result<EspStatus, (EspStatus, String)> {
    let c = CString::new(s).map_err(|_| (EspStatus::InvalidArgument, "string contains a NUL byte".to_string()))?;
    *out = c.into_raw();
    Ok(EspStatus::Ok)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn esp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn esp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an environment by name (`coop_nav`, `predator_prey`,
/// `formation_change`); `n_agents == 0` selects the default size.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esp_env_new(name: *const c_char, n_agents: usize, out: *mut *mut EspEnv) -> EspStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let name = str_arg(name, "name")?;
        let n = if n_agents == 0 { esp_core::envs::default_agents(name) } else { n_agents };
        let env = make_env(name, n).map_err(from_core)?;
        *out = Box::into_raw(Box::new(EspEnv { env, state: None }));
        Ok(EspStatus::Ok)
    })
}

/// # Safety
/// `env` must come from [`esp_env_new`] (or be NULL) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esp_env_free(env: *mut EspEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Sizes of an environment: agents, per-agent observation length, global
/// state length, and action width (1 for discrete, 2 for continuous).
///
/// # Safety
/// Pointers must be valid; any output pointer may be NULL to skip it.
#[no_mangle]
pub unsafe extern "C" fn esp_env_dims(
    env: *const EspEnv,
    n_agents: *mut usize,
    obs_dim: *mut usize,
    global_dim: *mut usize,
    action_width: *mut usize,
) -> EspStatus {
    guard(|| {
        let e = &ref_arg(env, "env")?.env;
        let width = match e.action_layout() {
            ActionLayout::Discrete { .. } => 1,
            ActionLayout::Continuous2d => 2,
        };
        for (p, v) in
            [(n_agents, e.n_agents()), (obs_dim, e.obs_dim()), (global_dim, e.global_dim()), (action_width, width)]
        {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(EspStatus::Ok)
    })
}

/// Starts a new episode from `seed`.
///
/// # Safety
/// `env` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn esp_env_reset(env: *mut EspEnv, seed: u64) -> EspStatus {
    guard(|| {
        let h = out_arg(env, "env")?;
        h.state = Some(h.env.reset(seed));
        Ok(EspStatus::Ok)
    })
}

/// Copies the global state into `buf` (length `len` ≥ global dim).
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn esp_env_global_state(env: *const EspEnv, buf: *mut f64, len: usize) -> EspStatus {
    guard(|| {
        let h = ref_arg(env, "env")?;
        let state = h.state.as_ref().ok_or((EspStatus::InvalidArgument, "call esp_env_reset first".to_string()))?;
        copy_out(&state.global, buf, len)
    })
}

/// Copies agent `agent`'s observation into `buf`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn esp_env_observation(env: *const EspEnv, agent: usize, buf: *mut f64, len: usize) -> EspStatus {
    guard(|| {
        let h = ref_arg(env, "env")?;
        let state = h.state.as_ref().ok_or((EspStatus::InvalidArgument, "call esp_env_reset first".to_string()))?;
        let obs = state
            .per_agent_obs
            .get(agent)
            .ok_or((EspStatus::InvalidArgument, format!("agent {agent} out of range")))?;
        copy_out(obs, buf, len)
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<EspStatus, (EspStatus, String)> {
    if buf.is_null() {
        return Err(null("buf"));
    }
    if len < src.len() {
        return Err((EspStatus::BufferTooSmall, format!("buffer holds {len} values, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(EspStatus::Ok)
}

/// Advances one step. `actions` holds one value per agent for discrete
/// environments (the action index) or two per agent for continuous ones.
///
/// # Safety
/// `actions` must hold `len` doubles; `reward` and `done` must be writable
/// (or NULL to skip).
#[no_mangle]
pub unsafe extern "C" fn esp_env_step(
    env: *mut EspEnv,
    actions: *const f64,
    len: usize,
    reward: *mut f64,
    done: *mut bool,
) -> EspStatus {
    guard(|| {
        let h = out_arg(env, "env")?;
        if actions.is_null() {
            return Err(null("actions"));
        }
        let raw = std::slice::from_raw_parts(actions, len);
        let n = h.env.n_agents();
        let joint: Vec<Action> = match h.env.action_layout() {
            ActionLayout::Discrete { displacements } => {
                if len != n {
                    return Err((EspStatus::InvalidArgument, format!("expected {n} actions, got {len}")));
                }
                raw.iter()
                    .map(|&a| {
                        if a >= 0.0 && a.fract() == 0.0 && (a as usize) < displacements.len() {
                            Ok(Action::Discrete(a as usize))
                        } else {
                            Err((EspStatus::InvalidArgument, format!("invalid discrete action {a}")))
                        }
                    })
                    .collect::<Result<_, _>>()?
            }
            ActionLayout::Continuous2d => {
                if len != 2 * n {
                    return Err((EspStatus::InvalidArgument, format!("expected {} values, got {len}", 2 * n)));
                }
                raw.chunks_exact(2).map(|c| Action::Continuous([c[0], c[1]])).collect()
            }
        };
        let state = h.state.as_ref().ok_or((EspStatus::InvalidArgument, "call esp_env_reset first".to_string()))?;
        let out = h.env.step(state, &JointAction(joint)).map_err(from_core)?;
        if let Some(r) = reward.as_mut() {
            *r = out.reward;
        }
        if let Some(d) = done.as_mut() {
            *d = out.done || out.truncated;
        }
        h.state = Some(out.state);
        Ok(EspStatus::Ok)
    })
}

/// Measures reward invariance and transition equivariance of `env` under
/// `group` over `samples` reachable pairs. Returns `ESP_STATUS_CHECK_FAILED`
/// when either exceeds its tolerance; the deviations are written either way.
///
/// # Safety
/// `group` must be NUL-terminated; outputs may be NULL.
#[no_mangle]
pub unsafe extern "C" fn esp_env_check_symmetry(
    env: *const EspEnv,
    group: *const c_char,
    samples: usize,
    seed: u64,
    reward_deviation: *mut f64,
    transition_deviation: *mut f64,
) -> EspStatus {
    guard(|| {
        let e = ref_arg(env, "env")?.env.as_ref();
        let g = group_by_name(str_arg(group, "group")?).map_err(from_core)?;
        let spec = SymmetrySpec::for_env(e, g).map_err(from_core)?;
        let r = check_reward_invariance(e, &spec, samples, seed).map_err(from_core)?;
        let t = check_transition_equivariance(e, &spec, samples, seed).map_err(from_core)?;
        if let Some(p) = reward_deviation.as_mut() {
            *p = r.max_deviation;
        }
        if let Some(p) = transition_deviation.as_mut() {
            *p = t.max_deviation;
        }
        if r.passed && t.passed {
            Ok(EspStatus::Ok)
        } else {
            Err((EspStatus::CheckFailed, format!("{r}{t}")))
        }
    })
}

/// Builds a group by name (`c<n>` or `d<n>`).
///
/// # Safety
/// `name` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esp_group_new(name: *const c_char, out: *mut *mut EspGroup) -> EspStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let group = group_by_name(str_arg(name, "name")?).map_err(from_core)?;
        *out = Box::into_raw(Box::new(EspGroup { group }));
        Ok(EspStatus::Ok)
    })
}

/// # Safety
/// `group` must come from [`esp_group_new`] (or be NULL) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn esp_group_free(group: *mut EspGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

/// Number of elements, or 0 for a NULL handle.
///
/// # Safety
/// `group` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn esp_group_order(group: *const EspGroup) -> usize {
    group.as_ref().map_or(0, |g| g.group.order())
}

/// `out = g_element · v` for a planar vector.
///
/// # Safety
/// `v` and `out` must each point to two doubles.
#[no_mangle]
pub unsafe extern "C" fn esp_group_apply(
    group: *const EspGroup,
    element: usize,
    v: *const f64,
    out: *mut f64,
) -> EspStatus {
    guard(|| {
        let g = ref_arg(group, "group")?;
        if v.is_null() || out.is_null() {
            return Err(null("v/out"));
        }
        let e = g.group.element(element).map_err(from_core)?;
        let r = e.apply_vec2(&[*v, *v.add(1)]);
        *out = r[0];
        *out.add(1) = r[1];
        Ok(EspStatus::Ok)
    })
}

/// Index of `a ∘ b`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn esp_group_compose(group: *const EspGroup, a: usize, b: usize, out: *mut usize) -> EspStatus {
    guard(|| {
        let g = &ref_arg(group, "group")?.group;
        let out = out_arg(out, "out")?;
        let c = g.compose(g.element(a).map_err(from_core)?, g.element(b).map_err(from_core)?).map_err(from_core)?;
        *out = c.id();
        Ok(EspStatus::Ok)
    })
}

/// Checks closure, identity, inverse and associativity.
/// `ESP_STATUS_CHECK_FAILED` carries the counterexample in the error message.
///
/// # Safety
/// `group` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn esp_group_check_axioms(group: *const EspGroup) -> EspStatus {
    guard(|| {
        let report = check_group_axioms(&ref_arg(group, "group")?.group);
        if report.all_passed() {
            Ok(EspStatus::Ok)
        } else {
            Err((EspStatus::CheckFailed, report.to_string()))
        }
    })
}

/// Runs the verification suite. `quick != 0` uses reduced sample counts.
/// The JSON report is returned through `report_json` (free with
/// [`esp_string_free`]) even when checks fail (`ESP_STATUS_CHECK_FAILED`).
///
/// # Safety
/// `report_json` must be writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn esp_verify_run(quick: bool, report_json: *mut *mut c_char) -> EspStatus {
    guard(|| {
        let opts = if quick {
            VerifyOptions { env_samples: 100, vector_samples: 1000, grad_instances: 5, ..VerifyOptions::default() }
        } else {
            VerifyOptions::default()
        };
        let report = verify(&opts).map_err(from_core)?;
        if let Some(out) = report_json.as_mut() {
            string_out(report.to_json(), out)?;
        }
        if report.passed {
            Ok(EspStatus::Ok)
        } else {
            Err((EspStatus::CheckFailed, report.to_string()))
        }
    })
}

/// Trains one seed from a TOML configuration string into `run_dir` and
/// writes the final mean evaluation return.
///
/// # Safety
/// Strings must be NUL-terminated; `final_return` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn esp_train(
    config_toml: *const c_char,
    seed: u64,
    run_dir: *const c_char,
    final_return: *mut f64,
) -> EspStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml_str(str_arg(config_toml, "config_toml")?).map_err(from_core)?;
        let dir = str_arg(run_dir, "run_dir")?;
        let summary = train(&cfg, seed, Path::new(dir)).map_err(from_core)?;
        if let Some(p) = final_return.as_mut() {
            *p = summary.final_eval.mean;
        }
        Ok(EspStatus::Ok)
    })
}

/// Evaluates a checkpoint on its own environment with deterministic actions.
///
/// # Safety
/// `path` must be NUL-terminated; outputs may be NULL.
#[no_mangle]
pub unsafe extern "C" fn esp_evaluate(
    path: *const c_char,
    episodes: usize,
    seed: u64,
    mean_return: *mut f64,
    stderr: *mut f64,
) -> EspStatus {
    guard(|| {
        let r = evaluate_checkpoint(Path::new(str_arg(path, "path")?), None, episodes, seed).map_err(from_core)?;
        if let Some(p) = mean_return.as_mut() {
            *p = r.mean;
        }
        if let Some(p) = stderr.as_mut() {
            *p = r.stderr;
        }
        Ok(EspStatus::Ok)
    })
}
