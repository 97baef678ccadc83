use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dnat_ffi::*;

fn build(template: &str, cells: usize) -> *mut DnatNetwork {
    let name = CString::new(template).unwrap();
    let mut net = ptr::null_mut();
    let st = unsafe { dnat_network_build(name.as_ptr(), 4, 3, 3, 8, 8, cells, &mut net) };
    assert_eq!(st, DnatStatus::Ok);
    assert!(!net.is_null());
    net
}

fn last_error() -> String {
    let p = dnat_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn build_count_cost_free() {
    let net = build("plain-cnn", 8);
    let mut edges = 0;
    let (mut params, mut flops) = (0u64, 0u64);
    let mut valid = false;
    unsafe {
        assert_eq!(dnat_network_edge_count(net, &mut edges), DnatStatus::Ok);
        assert_eq!(dnat_network_cost(net, &mut params, &mut flops), DnatStatus::Ok);
        assert_eq!(dnat_network_validate(net, &mut valid), DnatStatus::Ok);
        dnat_network_free(net);
    }
    assert_eq!(edges, 32);
    assert!(params > 0 && flops > 0);
    assert!(valid);
}

#[test]
fn tiny_hand_counted_cost() {
    let net = build("tiny", 1);
    let (mut params, mut flops) = (0u64, 0u64);
    unsafe {
        assert_eq!(dnat_network_cost(net, &mut params, &mut flops), DnatStatus::Ok);
        dnat_network_free(net);
    }
    // stem 3*4*9+4, four 4->4 3x3 convs of 148, head 4*3+3
    assert_eq!(params, 112 + 4 * 148 + 15);
    assert_eq!(flops, 64 * 4 * 3 * 9 + 4 * 64 * 4 * 4 * 9 + 12);
}

#[test]
fn unknown_template_sets_error() {
    let name = CString::new("vgg").unwrap();
    let mut net = ptr::null_mut();
    let st = unsafe { dnat_network_build(name.as_ptr(), 4, 3, 3, 8, 8, 1, &mut net) };
    assert_eq!(st, DnatStatus::GraphError);
    assert!(net.is_null());
    assert!(last_error().contains("vgg"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { dnat_network_build(ptr::null(), 4, 3, 3, 8, 8, 1, &mut net) }, DnatStatus::NullArgument);
    let mut n = 0;
    assert_eq!(unsafe { dnat_network_edge_count(ptr::null(), &mut n) }, DnatStatus::NullArgument);
    unsafe {
        dnat_network_free(ptr::null_mut());
        dnat_string_free(ptr::null_mut());
    }
}

#[test]
fn json_round_trip() {
    let net = build("resnet-mini", 1);
    let mut text = ptr::null_mut();
    let mut back = ptr::null_mut();
    let mut again = ptr::null_mut();
    unsafe {
        assert_eq!(dnat_network_to_json(net, &mut text), DnatStatus::Ok);
        assert_eq!(dnat_network_from_json(text, &mut back), DnatStatus::Ok);
        assert_eq!(dnat_network_to_json(back, &mut again), DnatStatus::Ok);
        assert_eq!(CStr::from_ptr(text), CStr::from_ptr(again));
        dnat_string_free(text);
        dnat_string_free(again);
        dnat_network_free(net);
        dnat_network_free(back);
    }
}

#[test]
fn apply_choices_and_diff() {
    let net = build("tiny", 1);
    let choices = [DnatChoice::Same, DnatChoice::None, DnatChoice::Id, DnatChoice::Same];
    let mut out = ptr::null_mut();
    let mut dot = ptr::null_mut();
    let (mut p0, mut f0, mut p1, mut f1) = (0, 0, 0, 0);
    let mut edges = 0;
    unsafe {
        assert_eq!(dnat_network_apply_choices(net, choices.as_ptr(), 4, &mut out), DnatStatus::Ok);
        assert_eq!(dnat_network_edge_count(out, &mut edges), DnatStatus::Ok);
        dnat_network_cost(net, &mut p0, &mut f0);
        dnat_network_cost(out, &mut p1, &mut f1);
        assert_eq!(dnat_network_diff_dot(net, out, &mut dot), DnatStatus::Ok);
        let text = CStr::from_ptr(dot).to_str().unwrap().to_owned();
        assert_eq!(text.matches("fontcolor=red").count(), 2);
        dnat_string_free(dot);
        dnat_network_free(out);
    }
    assert_eq!(edges, 3);
    assert!(p1 < p0 && f1 < f0);

    let all_none = [DnatChoice::None; 4];
    let mut valid = true;
    unsafe {
        assert_eq!(dnat_network_apply_choices(net, all_none.as_ptr(), 4, &mut out), DnatStatus::Ok);
        assert_eq!(dnat_network_validate(out, &mut valid), DnatStatus::Ok);
        dnat_network_free(out);
    }
    assert!(!valid);

    unsafe {
        assert_eq!(dnat_network_apply_choices(net, choices.as_ptr(), 3, &mut out), DnatStatus::InvalidArgument);
        let bad: [i32; 4] = [2, 2, 7, 2];
        assert_eq!(dnat_network_apply_choices(net, bad.as_ptr().cast(), 4, &mut out), DnatStatus::InvalidArgument);
        dnat_network_free(net);
    }
    assert!(last_error().contains("out of range"));
}

#[test]
fn aggregate_matches_table_average() {
    let v = [91.74, 91.74, 91.65, 91.76, 91.39];
    let (mut mean, mut std) = (0.0, 0.0);
    assert_eq!(unsafe { dnat_aggregate(v.as_ptr(), v.len(), &mut mean, &mut std) }, DnatStatus::Ok);
    assert_eq!((mean * 100.0).round() / 100.0, 91.66);
    assert_eq!(unsafe { dnat_aggregate(v.as_ptr(), 0, &mut mean, &mut std) }, DnatStatus::InvalidArgument);
}

#[test]
fn transform_run_from_config_text() {
    let cfg = CString::new(
        "model = \"tiny\"\nchannels = 2\nclasses = 3\ntrain_per_class = 4\ntest_per_class = 2\nimage_size = 8\ntotal_epochs = 2\nbatch_size = 6\n",
    )
    .unwrap();
    let mut acc = -1.0;
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { dnat_transform_run(cfg.as_ptr(), &mut acc, &mut net) }, DnatStatus::Ok);
    assert!((0.0..=1.0).contains(&acc));
    unsafe { dnat_network_free(net) };

    let bad = CString::new("bogus = 1\n").unwrap();
    assert_eq!(unsafe { dnat_transform_run(bad.as_ptr(), &mut acc, &mut net) }, DnatStatus::ConfigError);
    assert!(last_error().contains("bogus"));

    let reject = CString::new(
        "model = \"tiny\"\nchannels = 2\nclasses = 3\ntrain_per_class = 4\ntest_per_class = 2\nimage_size = 8\ntotal_epochs = 2\ntheta_preset = \"all-none\"\nrepair_policy = \"reject\"\n",
    )
    .unwrap();
    assert_eq!(unsafe { dnat_transform_run(reject.as_ptr(), &mut acc, &mut net) }, DnatStatus::Disconnected);
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(dnat_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dnat.h");
    assert!(header.exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ DnatNetwork *n = 0; size_t e = 0; return dnat_network_edge_count(n, &e) == DNAT_STATUS_OK; }}\n",
            header.display()
        ),
    )
    .unwrap();
    match Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(s) => assert!(s.success(), "header failed to compile"),
        Err(_) => eprintln!("no C compiler found; header syntax check skipped"),
    }
}
