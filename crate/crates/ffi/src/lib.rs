//! C ABI over trained policies, the traffic simulator and evaluation.
//!
//! Every fallible call returns an [`SrStatus`]; the message of the last
//! failure on the calling thread is available through [`sr_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use scene_rep::scene::{build_state, HistoryBuffer, SceneConfig, SceneState};
use scene_rep::sim::{HybridAction, Outcome, ScenarioConfig, SimObservation, Simulator};
use scene_rep::train::{evaluate, Checkpoint, Policy, TrainConfig};
use scene_rep::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Checkpoint = 5,
    Runtime = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SrOutcome {
    #[default]
    Running = 0,
    Goal = 1,
    Collision = 2,
    OffRoute = 3,
    Timeout = 4,
}

impl From<Outcome> for SrOutcome {
    fn from(o: Outcome) -> Self {
        match o {
            Outcome::Running => SrOutcome::Running,
            Outcome::Goal => SrOutcome::Goal,
            Outcome::Collision => SrOutcome::Collision,
            Outcome::OffRoute => SrOutcome::OffRoute,
            Outcome::Timeout => SrOutcome::Timeout,
        }
    }
}

/// Result of one environment step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SrStep {
    pub reward: f64,
    pub done: bool,
    pub outcome: SrOutcome,
    pub episode_step: u32,
    /// Commanded target speed (m/s).
    pub target_speed: f64,
    /// Commanded lane change: -1 left, 0 keep, +1 right.
    pub lane_command: i8,
}

/// Aggregate evaluation metrics; rates are percentages and completion
/// times are NaN when no episode succeeded.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SrEvalSummary {
    pub episodes: u32,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub stagnation_rate: f64,
    pub off_route_rate: f64,
    pub completion_time_mean: f64,
    pub completion_time_std: f64,
}

/// Opaque trained policy.
pub struct SrPolicy {
    inner: Policy,
}

/// Opaque simulator with the ego's observation history.
pub struct SrEnv {
    sim: Simulator,
    scene: SceneConfig,
    v_max: f64,
    history: HistoryBuffer,
    obs: Option<SimObservation>,
}

impl SrEnv {
    fn state(&self) -> Option<SceneState> {
        self.obs.as_ref().map(|o| build_state(&self.scene, &self.history, o))
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SrStatus {
    match e {
        Error::Config(_) | Error::Usage(_) => SrStatus::InvalidArgument,
        Error::Io(_) => SrStatus::Io,
        Error::Json(_) => SrStatus::Parse,
        Error::Checkpoint(_) | Error::Snapshot(_) => SrStatus::Checkpoint,
        Error::NonFinite(_) => SrStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), SrStatus>) -> SrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            SrStatus::Panic
        }
    }
}

fn fail(e: Error) -> SrStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> SrStatus {
    set_error(format!("{what} is null"));
    SrStatus::NullPointer
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(s: *const c_char, what: &str) -> Result<&'a str, SrStatus> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        SrStatus::InvalidArgument
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns its full length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sr_last_error(buf: *mut c_char, len: usize) -> usize {
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

/// Loads a checkpoint file into a new policy handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sr_policy_load(path: *const c_char, out: *mut *mut SrPolicy) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = Checkpoint::load(path).and_then(|c| c.policy()).map_err(fail)?;
        *out = Box::into_raw(Box::new(SrPolicy { inner }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from [`sr_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sr_policy_free(policy: *mut SrPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Mean action of the policy for the environment's current state,
/// written as raw values in [-1, 1] to `out[0..2]`.
///
/// # Safety
/// Handles must be live; `out` must point to two writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sr_policy_act(policy: *const SrPolicy, env: *const SrEnv, out: *mut f64) -> SrStatus {
    guard(|| {
        let (Some(p), Some(e)) = (policy.as_ref(), env.as_ref()) else {
            return Err(null("policy or env"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        if e.scene != p.inner.config.scene() {
            return Err(fail(Error::Usage("environment was created for a different observation layout".into())));
        }
        let state = e.state().ok_or_else(|| fail(Error::Usage("environment has not been reset".into())))?;
        let a = p.inner.act(&state);
        *out = a[0];
        *out.add(1) = a[1];
        Ok(())
    })
}

/// Deterministic evaluation of `policy` on a scenario preset name or JSON
/// file path.
///
/// # Safety
/// `policy` must be live, `scenario` a valid string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sr_evaluate(
    policy: *const SrPolicy,
    scenario: *const c_char,
    episodes: u32,
    seed: u64,
    out: *mut SrEvalSummary,
) -> SrStatus {
    guard(|| {
        let Some(p) = policy.as_ref() else {
            return Err(null("policy"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        let sc = ScenarioConfig::load(str_arg(scenario, "scenario")?).map_err(fail)?;
        let r = evaluate(&p.inner, &sc, episodes as usize, seed, None).map_err(fail)?;
        *out = SrEvalSummary {
            episodes: r.episodes as u32,
            success_rate: r.success_rate,
            collision_rate: r.collision_rate,
            stagnation_rate: r.stagnation_rate,
            off_route_rate: r.off_route_rate,
            completion_time_mean: r.completion_time_mean.unwrap_or(f64::NAN),
            completion_time_std: r.completion_time_std.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Creates a simulator for a scenario preset name or JSON file path. The
/// observation layout follows `policy` when given, else the defaults.
///
/// # Safety
/// `scenario` must be a valid string, `policy` null or live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn sr_env_new(scenario: *const c_char, policy: *const SrPolicy, out: *mut *mut SrEnv) -> SrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let sc = ScenarioConfig::load(str_arg(scenario, "scenario")?).map_err(fail)?;
        let cfg = policy.as_ref().map(|p| p.inner.config.clone()).unwrap_or_else(TrainConfig::default);
        let scene = cfg.scene();
        let mut sim = Simulator::new(sc).map_err(fail)?;
        sim.route_count = scene.routes;
        sim.route_len = scene.route_len;
        *out = Box::into_raw(Box::new(SrEnv {
            sim,
            history: HistoryBuffer::new(scene.history),
            scene,
            v_max: cfg.v_max,
            obs: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `env` must be null or a handle from [`sr_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sr_env_free(env: *mut SrEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Starts a new episode.
///
/// # Safety
/// `env` must be live.
#[no_mangle]
pub unsafe extern "C" fn sr_env_reset(env: *mut SrEnv, seed: u64) -> SrStatus {
    guard(|| {
        let Some(e) = env.as_mut() else {
            return Err(null("env"));
        };
        let obs = e.sim.reset(seed);
        e.history.clear();
        e.history.update(&obs);
        e.obs = Some(obs);
        Ok(())
    })
}

/// Applies a raw action `[speed, lane]` in [-1, 1]^2.
///
/// # Safety
/// `env` must be live; `action` must point to two doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sr_env_step(env: *mut SrEnv, action: *const f64, out: *mut SrStep) -> SrStatus {
    guard(|| {
        let Some(e) = env.as_mut() else {
            return Err(null("env"));
        };
        if action.is_null() || out.is_null() {
            return Err(null("action or out"));
        }
        if e.obs.is_none() {
            return Err(fail(Error::Usage("environment has not been reset".into())));
        }
        let raw = [*action, *action.add(1)];
        if !raw.iter().all(|x| x.is_finite()) {
            return Err(fail(Error::Usage("action must be finite".into())));
        }
        let a = HybridAction::from_raw(raw, e.v_max);
        let (obs, reward, done, info) = e.sim.step(&a).map_err(fail)?;
        e.history.update(&obs);
        e.obs = Some(obs);
        *out = SrStep {
            reward,
            done,
            outcome: info.outcome.into(),
            episode_step: info.episode_step,
            target_speed: a.target_speed,
            lane_command: a.lane_command,
        };
        Ok(())
    })
}

/// Number of vehicles currently simulated, ego included.
///
/// # Safety
/// `env` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sr_env_vehicle_count(env: *const SrEnv, out: *mut usize) -> SrStatus {
    guard(|| {
        let Some(e) = env.as_ref() else {
            return Err(null("env"));
        };
        if out.is_null() {
            return Err(null("out"));
        }
        *out = e.sim.vehicles().len();
        Ok(())
    })
}
