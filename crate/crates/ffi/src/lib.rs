//! C ABI over `dnat`.
//!
//! Every fallible function returns a [`DnatStatus`]; on failure the message
//! is available from [`dnat_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings handed
//! out by the library must be released with [`dnat_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dnat::config::RunConfig;
use dnat::graph::{apply_decisions, to_dot, Choice, GraphError, Network, Shape};
use dnat::harness::aggregate;
use dnat::templates::{build_network, NetworkConfig, TemplateName};
use dnat::trainer::run_two_stage;
use dnat::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnatStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    GraphError = 4,
    Disconnected = 5,
    ConfigError = 6,
    Diverged = 7,
    IoError = 8,
    CheckpointError = 9,
    Internal = 10,
    Panic = 11,
}

/// Per-edge decision, as used by [`dnat_network_apply_choices`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DnatChoice {
    None = 0,
    Id = 1,
    Same = 2,
}

/// Opaque network handle.
pub struct DnatNetwork {
    inner: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

struct Fail(DnatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Graph(_) | Error::Tensor(_) => DnatStatus::GraphError,
            Error::Repair(_) => DnatStatus::Disconnected,
            Error::Config(_) => DnatStatus::ConfigError,
            Error::Diverged { .. } => DnatStatus::Diverged,
            Error::Io { .. } | Error::Data(_) => DnatStatus::IoError,
            Error::Checkpoint(_) => DnatStatus::CheckpointError,
            _ => DnatStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

impl From<GraphError> for Fail {
    fn from(e: GraphError) -> Self {
        Error::from(e).into()
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DnatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DnatStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DnatStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(DnatStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(DnatStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn net_arg<'a>(p: *const DnatNetwork, what: &str) -> Result<&'a Network, Fail> {
    p.as_ref().map(|n| &n.inner).ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("no interior nul").into_raw()
}

fn boxed(net: Network) -> *mut DnatNetwork {
    Box::into_raw(Box::new(DnatNetwork { inner: net }))
}

/// Message of the last failed call on this thread, or null. Owned by the
/// library and valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dnat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dnat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dnat_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a template network: `template` is `tiny`, `plain-cnn` or
/// `resnet-mini`; `cells` is the cell count (plain-cnn) or blocks per stage
/// (resnet-mini).
///
/// # Safety
/// `template` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_build(
    template: *const c_char,
    channels: usize,
    num_classes: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    cells: usize,
    out: *mut *mut DnatNetwork,
) -> DnatStatus {
    guard(|| {
        let name: TemplateName = str_arg(template, "template")?.parse()?;
        let cfg = NetworkConfig::new(channels, num_classes, Shape::new(in_channels, height, width)).with_cells(cells);
        let net = build_network(name, &cfg)?;
        put(out, boxed(net), "out")
    })
}

/// Parses an architecture JSON document.
///
/// # Safety
/// `json` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_from_json(json: *const c_char, out: *mut *mut DnatNetwork) -> DnatStatus {
    guard(|| {
        let (net, _) = Network::from_json(str_arg(json, "json")?)?;
        put(out, boxed(net), "out")
    })
}

/// Serializes a network; free the result with [`dnat_string_free`].
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_to_json(net: *const DnatNetwork, out: *mut *mut c_char) -> DnatStatus {
    guard(|| {
        let n = net_arg(net, "net")?;
        put(out, c_string(n.to_json(None)), "out")
    })
}

/// Releases a network handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_free(net: *mut DnatNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of edge instances over all cells.
///
/// # Safety
/// `net` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_edge_count(net: *const DnatNetwork, out: *mut usize) -> DnatStatus {
    guard(|| put(out, net_arg(net, "net")?.edge_count(), "out"))
}

/// Trainable scalars and multiply-accumulates of one forward pass.
///
/// # Safety
/// `net` must be a live handle; `params` and `flops` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_cost(net: *const DnatNetwork, params: *mut u64, flops: *mut u64) -> DnatStatus {
    guard(|| {
        let c = net_arg(net, "net")?.cost()?;
        put(params, c.params as u64, "params")?;
        put(flops, c.flops as u64, "flops")
    })
}

/// Writes whether the network is acyclic, shape-consistent and has every
/// cell output reachable from its input.
///
/// # Safety
/// `net` must be a live handle; `valid` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_validate(net: *const DnatNetwork, valid: *mut bool) -> DnatStatus {
    guard(|| {
        let r = net_arg(net, "net")?.validate();
        put(valid, r.is_ok() && r.connected, "valid")
    })
}

/// Applies one choice per edge (in cell, then edge id order) and prunes.
///
/// # Safety
/// `net` must be a live handle, `choices` must point to `len` readable
/// values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_apply_choices(
    net: *const DnatNetwork,
    choices: *const DnatChoice,
    len: usize,
    out: *mut *mut DnatNetwork,
) -> DnatStatus {
    guard(|| {
        let n = net_arg(net, "net")?;
        if choices.is_null() && len > 0 {
            return Err(null("choices"));
        }
        let refs = n.edge_refs();
        if len != refs.len() {
            return Err(Fail(DnatStatus::InvalidArgument, format!("expected {} choices, got {len}", refs.len())));
        }
        // read as raw integers so out-of-range values are rejected, not UB
        let raw = if len == 0 { &[][..] } else { std::slice::from_raw_parts(choices.cast::<i32>(), len) };
        let mut map = BTreeMap::new();
        for (at, &c) in refs.into_iter().zip(raw) {
            let choice = match c {
                0 => Choice::None,
                1 => Choice::Id,
                2 => Choice::Same,
                other => return Err(Fail(DnatStatus::InvalidArgument, format!("choice {other} for edge {at} is out of range"))),
            };
            map.insert(at, choice);
        }
        put(out, boxed(apply_decisions(n, &map)?), "out")
    })
}

/// DOT rendering of `transformed` with edges changed from `original` in red.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_network_diff_dot(original: *const DnatNetwork, transformed: *const DnatNetwork, out: *mut *mut c_char) -> DnatStatus {
    guard(|| {
        let dot = to_dot(net_arg(original, "original")?, net_arg(transformed, "transformed")?, None)?;
        put(out, c_string(dot), "out")
    })
}

/// Mean and sample standard deviation of `len` values.
///
/// # Safety
/// `values` must point to `len` readable doubles; `mean` and `std` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_aggregate(values: *const f64, len: usize, mean: *mut f64, std: *mut f64) -> DnatStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let a = aggregate(std::slice::from_raw_parts(values, len)).map_err(|e| Fail(DnatStatus::InvalidArgument, e.to_string()))?;
        put(mean, a.mean, "mean")?;
        put(std, a.std, "std")
    })
}

/// Runs the two-stage pipeline described by a TOML run configuration (the
/// same text the CLI reads) and returns the final test accuracy in `[0, 1]`
/// and the transformed network.
///
/// # Safety
/// `config_toml` must be a valid C string; `accuracy` and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dnat_transform_run(config_toml: *const c_char, accuracy: *mut f64, out: *mut *mut DnatNetwork) -> DnatStatus {
    guard(|| {
        let cfg = RunConfig::parse(str_arg(config_toml, "config_toml")?, "<ffi>").map_err(Error::from)?;
        let data = cfg.dataset()?;
        let net = cfg.network()?;
        let trained = run_two_stage(cfg.train_config(cfg.transform_mode, cfg.seed), net, &data)?;
        put(accuracy, trained.test_accuracy, "accuracy")?;
        put(out, boxed(trained.model.network), "out")
    })
}
