use std::ffi::{CStr, CString};
use std::ptr;

use longstyle::corpus::{generate_synthetic, SynthSpec};
use longstyle::generator::Model;
use longstyle::runner::{save_checkpoint, Corpus, RunConfig};
use longstyle_ffi::*;

fn last_error() -> String {
    let p = ls_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn overall_metrics_matches_published_cells() {
    let (mut bl, mut bs) = (0.0, 0.0);
    assert_eq!(unsafe { ls_overall_metrics(60.3, 27.3, 10.6, 83.6, &mut bl, &mut bs) }, LsStatus::Ok);
    assert!((bl - 33.8).abs() < 0.05 && (bs - 71.0).abs() < 0.05, "{bl} {bs}");
    assert_eq!(unsafe { ls_overall_metrics(-1.0, 1.0, 1.0, 1.0, &mut bl, &mut bs) }, LsStatus::InvalidArgument);
    assert!(last_error().contains("-1"));
    assert_eq!(unsafe { ls_overall_metrics(1.0, 1.0, 1.0, 1.0, ptr::null_mut(), &mut bs) }, LsStatus::NullPointer);
}

#[test]
fn bleu_over_c_arrays() {
    let c = [5u32, 6, 7];
    let r = [5u32, 6, 8];
    let cands = [c.as_ptr()];
    let refs = [r.as_ptr()];
    let mut out = 0.0;
    let st = unsafe { ls_bleu(cands.as_ptr(), [3usize].as_ptr(), refs.as_ptr(), [3usize].as_ptr(), 1, 1, &mut out) };
    assert_eq!(st, LsStatus::Ok);
    assert!((out - 200.0 / 3.0).abs() < 1e-9, "{out}");
    let st = unsafe { ls_bleu(cands.as_ptr(), [3usize].as_ptr(), refs.as_ptr(), [3usize].as_ptr(), 1, 0, &mut out) };
    assert_eq!(st, LsStatus::InvalidArgument);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(ls_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec { train_docs: 6, val_docs: 2, test_docs: 2, ..SynthSpec::default() };
    let synth = generate_synthetic(&spec).unwrap();
    synth.write_dir(dir.path()).unwrap();
    let corpus = Corpus::from_synth(synth);
    let cfg = RunConfig { d: 8, ffn_hidden: 16, enc_layers: 1, dec_layers: 1, nar_layers: 1, fusion_layers: 1, jscw_layers: 1, ..RunConfig::default() };
    let model = Model::new(cfg.model_config(corpus.vocab.len(), corpus.styles.len(), corpus.terminator_ids()), 3).unwrap();
    let ck = dir.path().join("model.json");
    save_checkpoint(&ck, &model, &cfg, None).unwrap();

    let ck_c = CString::new(ck.to_str().unwrap()).unwrap();
    let dir_c = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h: *mut LsModel = ptr::null_mut();
    assert_eq!(unsafe { ls_model_load(ck_c.as_ptr(), dir_c.as_ptr(), &mut h) }, LsStatus::Ok);
    assert!(!h.is_null());
    assert_eq!(unsafe { ls_model_num_styles(h) }, 2);

    let doc = &corpus.test[0];
    let text = CString::new(corpus.tokenizer.detokenize(&doc.tokens, &corpus.vocab)).unwrap();
    let src = CString::new(corpus.styles.name(doc.style)).unwrap();
    let tgt = CString::new(corpus.styles.name(1 - doc.style)).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ls_model_transfer(h, text.as_ptr(), src.as_ptr(), tgt.as_ptr(), &mut out) }, LsStatus::Ok);
    let first = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_owned();
    let expected = corpus.tokenizer.detokenize(&model.transfer(doc, 1 - doc.style).unwrap(), &corpus.vocab);
    assert_eq!(first, expected);
    unsafe { ls_string_free(out) };

    let bad = CString::new("nope").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ls_model_transfer(h, text.as_ptr(), src.as_ptr(), bad.as_ptr(), &mut out) }, LsStatus::InvalidArgument);
    assert!(out.is_null());
    assert!(last_error().contains("nope"));
    assert_eq!(unsafe { ls_model_transfer(h, ptr::null(), src.as_ptr(), tgt.as_ptr(), &mut out) }, LsStatus::NullPointer);
    unsafe { ls_model_free(h) };
    unsafe { ls_model_free(ptr::null_mut()) };

    let missing = CString::new("/nonexistent/model.json").unwrap();
    let mut h: *mut LsModel = ptr::null_mut();
    assert_eq!(unsafe { ls_model_load(missing.as_ptr(), dir_c.as_ptr(), &mut h) }, LsStatus::Io);
    assert!(h.is_null());
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/longstyle.h")).unwrap();
    for f in ["ls_last_error_message", "ls_version", "ls_model_load", "ls_model_free", "ls_model_num_styles", "ls_model_transfer", "ls_string_free", "ls_overall_metrics", "ls_bleu"] {
        assert!(h.contains(&format!("{f}(")), "{f} missing from header");
    }
}
