//! C interface to distcomp.
//!
//! Every function returns a [`DcStatus`]; results go through out-pointers.
//! Objects are opaque handles created by `dc_*_new`/`dc_*_load` and released
//! with the matching `dc_*_free`. After a failure, `dc_last_error` describes
//! it (per thread).
//!
//! Matrices cross the boundary as row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use distcomp::baselines::{bcd_policy, evd_policies, BcdSettings};
use distcomp::cost::{cost_global, cost_local};
use distcomp::fusion::{CompressionPolicy, EstimatorBank};
use distcomp::network::checkpoint;
use distcomp::network::train::freeze_policy;
use distcomp::network::PolicyNetwork;
use distcomp::quantization::QuantizerSpec;
use distcomp::signal::{build_source_covariance, ChannelSet, SourceModel};
use distcomp::{Error, Matrix, Vector};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    SingularMatrix = 3,
    Numerical = 4,
    Precondition = 5,
    Config = 6,
    Io = 7,
    Schema = 8,
    /// A bug inside the library; the message holds the panic text.
    Internal = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into_bytes());
}

fn status_of(e: &Error) -> DcStatus {
    match e {
        Error::Precondition(_) => DcStatus::Precondition,
        Error::SingularMatrix(_) => DcStatus::SingularMatrix,
        Error::InvalidInput(_) => DcStatus::InvalidInput,
        Error::Numerical(_) => DcStatus::Numerical,
        Error::Config { .. } => DcStatus::Config,
        Error::Schema(_) | Error::Csv(_) => DcStatus::Schema,
        Error::Io { .. } => DcStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

/// Runs `body`, converting errors and panics into a status code.
fn guard(body: impl FnOnce() -> Outcome) -> DcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            DcStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("`{what}` is null"));
            DcStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            DcStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(p: *mut T, value: T, what: &'static str) -> Outcome {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    p.write(value);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

// ---------------------------------------------------------------------------
// cost model and quantizer

/// Signaling cost with global CSI.
///
/// # Safety
/// `out_total` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_cost_global(m: u64, n: u64, k: u64, t: u64, out_total: *mut u64) -> DcStatus {
    guard(|| write(out_total, cost_global(m, n, k, t).total, "out_total"))
}

/// Signaling cost with local CSI.
///
/// # Safety
/// `out_total` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_cost_local(n: u64, k: u64, t: u64, out_total: *mut u64) -> DcStatus {
    guard(|| write(out_total, cost_local(n, k, t).total, "out_total"))
}

/// Midrise quantization of `v` to `bits` bits over `[-range, range]`.
///
/// # Safety
/// `out_index` and `out_value` must each be null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_quantize(
    bits: u32,
    range: f64,
    v: f64,
    out_index: *mut u64,
    out_value: *mut f64,
) -> DcStatus {
    guard(|| {
        let (index, value) = QuantizerSpec::new(bits, range)?.quantize(v)?;
        if !out_index.is_null() {
            out_index.write(index);
        }
        if !out_value.is_null() {
            out_value.write(value);
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// system

/// Channels, source statistics and noise level of one realization.
pub struct DcSystem {
    channels: ChannelSet,
    source: SourceModel,
    sigma2: f64,
}

/// Creates a system from `agents` channel matrices of `m x n` each, stored
/// one after another, row-major.
///
/// # Safety
/// `channels` must hold `agents * m * n` doubles; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_system_new(
    channels: *const f64,
    agents: usize,
    m: usize,
    n: usize,
    rho: f64,
    sigma2: f64,
    out: *mut *mut DcSystem,
) -> DcStatus {
    guard(|| {
        if agents == 0 || m == 0 || n == 0 {
            return Err(Error::InvalidInput("agents, m and n must be positive".into()).into());
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!("noise variance must be positive, got {sigma2}")).into());
        }
        let data = slice(channels, agents * m * n, "channels")?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("channel entries must be finite".into()).into());
        }
        let h = data.chunks(m * n).map(|c| Matrix::from_row_slice(m, n, c)).collect();
        let system = DcSystem {
            channels: ChannelSet { h },
            source: build_source_covariance(n, rho)?,
            sigma2,
        };
        write(out, Box::into_raw(Box::new(system)), "out")
    })
}

/// # Safety
/// `system` must be null or a handle from `dc_system_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dc_system_free(system: *mut DcSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

// ---------------------------------------------------------------------------
// policies

/// Per-agent compression matrices.
pub struct DcPolicy {
    policy: CompressionPolicy,
}

fn boxed_policy(policy: CompressionPolicy, out: *mut *mut DcPolicy) -> Outcome {
    unsafe { write(out, Box::into_raw(Box::new(DcPolicy { policy })), "out") }
}

/// Local eigenvector policy with `k_max` rows per agent.
///
/// # Safety
/// `system` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_policy_evd(system: *const DcSystem, k_max: usize, out: *mut *mut DcPolicy) -> DcStatus {
    guard(|| {
        let s = deref(system, "system")?;
        boxed_policy(evd_policies(&s.channels, s.source.covariance(), s.sigma2, k_max)?, out)
    })
}

/// Block coordinate descent policy for exactly `k` rows per agent.
///
/// # Safety
/// `system` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_policy_bcd(system: *const DcSystem, k: usize, out: *mut *mut DcPolicy) -> DcStatus {
    guard(|| {
        let s = deref(system, "system")?;
        let outcome = bcd_policy(&s.channels, s.source.covariance(), s.sigma2, k, &BcdSettings::default())?;
        boxed_policy(outcome.policy, out)
    })
}

/// Rows per agent.
///
/// # Safety
/// `policy` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_policy_k_max(policy: *const DcPolicy, out: *mut usize) -> DcStatus {
    guard(|| write(out, deref(policy, "policy")?.policy.k_max(), "out"))
}

/// The first `k` compressed values `W_agent[k] y` of observation `y`
/// (length `m`), unquantized.
///
/// # Safety
/// `y` must hold `m` doubles and `out` room for `k`.
#[no_mangle]
pub unsafe extern "C" fn dc_policy_compress(
    policy: *const DcPolicy,
    agent: usize,
    k: usize,
    y: *const f64,
    out: *mut f64,
) -> DcStatus {
    guard(|| {
        let p = &deref(policy, "policy")?.policy;
        if agent >= p.agents() || k == 0 || k > p.k_max() {
            return Err(Error::InvalidInput(format!(
                "agent {agent} / stage {k} outside {} agents x {} stages",
                p.agents(),
                p.k_max()
            ))
            .into());
        }
        let m = p.observation_dim();
        let y = Vector::from_column_slice(slice(y, m, "y")?);
        let z = p.prefix(agent, k) * y;
        slice_mut(out, k, "out")?.copy_from_slice(z.as_slice());
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_policy_free(policy: *mut DcPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

// ---------------------------------------------------------------------------
// trained networks

pub struct DcNetwork {
    network: PolicyNetwork,
}

/// Loads a network checkpoint manifest written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_network_load(path: *const c_char, out: *mut *mut DcNetwork) -> DcStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidInput("path is not UTF-8".into()))?;
        let loaded = checkpoint::load(std::path::Path::new(path))?;
        write(
            out,
            Box::into_raw(Box::new(DcNetwork {
                network: loaded.network,
            })),
            "out",
        )
    })
}

/// Runs the network on the system's channels and returns the resulting
/// policy with its dynamic ranges.
///
/// # Safety
/// `network` and `system` must be live handles; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_network_policy(
    network: *const DcNetwork,
    system: *const DcSystem,
    out: *mut *mut DcPolicy,
) -> DcStatus {
    guard(|| {
        let net = &deref(network, "network")?.network;
        let s = deref(system, "system")?;
        boxed_policy(freeze_policy(net, &s.channels)?, out)
    })
}

/// # Safety
/// `network` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_network_free(network: *mut DcNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

// ---------------------------------------------------------------------------
// fusion center

/// LMMSE estimators for every stage of one policy on one system.
pub struct DcEstimator {
    bank: EstimatorBank,
    agents: usize,
    n: usize,
}

/// # Safety
/// `system` and `policy` must be live handles; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_estimator_new(
    system: *const DcSystem,
    policy: *const DcPolicy,
    out: *mut *mut DcEstimator,
) -> DcStatus {
    guard(|| {
        let s = deref(system, "system")?;
        let p = &deref(policy, "policy")?.policy;
        let bank = EstimatorBank::build(p, &s.channels, s.source.covariance(), s.sigma2)?;
        let est = DcEstimator {
            bank,
            agents: p.agents(),
            n: s.source.dim(),
        };
        write(out, Box::into_raw(Box::new(est)), "out")
    })
}

/// Source estimate from the first `k` values of every agent, stacked
/// agent-major (`agents * k` doubles). Writes `n` doubles.
///
/// # Safety
/// `received` must hold `agents * k` doubles and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn dc_estimator_estimate(
    est: *const DcEstimator,
    k: usize,
    received: *const f64,
    out: *mut f64,
) -> DcStatus {
    guard(|| {
        let e = deref(est, "estimator")?;
        if k == 0 || k > e.bank.k_max() {
            return Err(Error::InvalidInput(format!("stage {k} outside 1..={}", e.bank.k_max())).into());
        }
        let r = Vector::from_column_slice(slice(received, e.agents * k, "received")?);
        let x = distcomp::fusion::estimate(e.bank.estimator(k), &r)?;
        slice_mut(out, e.n, "out")?.copy_from_slice(x.as_slice());
        Ok(())
    })
}

/// Unquantized MSE of stage `k`.
///
/// # Safety
/// `est` must be a live handle; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dc_estimator_mse(est: *const DcEstimator, k: usize, out: *mut f64) -> DcStatus {
    guard(|| {
        let e = deref(est, "estimator")?;
        if k == 0 || k > e.bank.k_max() {
            return Err(Error::InvalidInput(format!("stage {k} outside 1..={}", e.bank.k_max())).into());
        }
        write(out, e.bank.analytic_mse(k), "out")
    })
}

/// # Safety
/// `est` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dc_estimator_free(est: *mut DcEstimator) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}
