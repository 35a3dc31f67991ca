use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ikrl::evaluation::dissimilarity;
use ikrl::io::save_checkpoint;
use ikrl::model::{energy, entity_ibr};
use ikrl::synth::{generate, SynthConfig, SynthOutput};
use ikrl::{AggregationMode, ModelParams, Norm, ScoringMode};
use ikrl_ffi::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    _dir: tempfile::TempDir,
    out: SynthOutput,
    params: ModelParams,
    checkpoint: CString,
    features: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let out = generate(&SynthConfig {
        n_entities: 10,
        n_relations: 2,
        triples_per_relation: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    out.write_dir(dir.path()).unwrap();
    // Parameters exactly representable in the f32 checkpoint.
    let mut params = ModelParams::random(10, 2, 16, 64, &mut ChaCha8Rng::seed_from_u64(1));
    for m in [
        &mut params.entities,
        &mut params.relations,
        &mut params.projection,
    ] {
        m.as_mut_slice().iter_mut().for_each(|x| *x = *x as f32 as f64);
    }
    let ckpt = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &params).unwrap();
    let c = |p: &Path| CString::new(p.to_str().unwrap()).unwrap();
    Fixture {
        checkpoint: c(&ckpt),
        features: c(&dir.path().join("features.bin")),
        _dir: dir,
        out,
        params,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(ikrl_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn load(f: &Fixture) -> (*mut IkrlModel, *mut IkrlFeatures) {
    let (mut model, mut feats) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(ikrl_model_load(f.checkpoint.as_ptr(), &mut model), IkrlStatus::Ok);
        assert_eq!(
            ikrl_features_load(f.features.as_ptr(), &mut feats),
            IkrlStatus::Ok
        );
    }
    (model, feats)
}

#[test]
fn scores_match_the_library() {
    let f = fixture();
    let (model, feats) = load(&f);
    unsafe {
        let (mut ne, mut nr, mut ds, mut di) = (0, 0, 0, 0);
        assert_eq!(
            ikrl_model_dims(model, &mut ne, &mut nr, &mut ds, &mut di),
            IkrlStatus::Ok
        );
        assert_eq!((ne, nr, ds, di), (10, 2, 16, 64));

        let mut e = 0.0;
        assert_eq!(ikrl_energy(model, feats, 1, 1, 2, 0, 1, &mut e), IkrlStatus::Ok);
        let want = energy(
            1,
            1,
            2,
            &f.params,
            &f.out.features,
            AggregationMode::Att,
            Norm::L2,
        )
        .unwrap();
        assert_eq!(e, want.total);

        let mut d = 0.0;
        assert_eq!(
            ikrl_dissimilarity(model, ptr::null(), 3, 0, 4, 0, 0.0, 0, 0, &mut d),
            IkrlStatus::Ok
        );
        let want = dissimilarity(
            3,
            0,
            4,
            &f.params,
            None,
            AggregationMode::Att,
            ScoringMode::Sbr,
            Norm::L1,
        )
        .unwrap();
        assert_eq!(d, want);
        assert_eq!(
            ikrl_dissimilarity(model, feats, 3, 0, 4, 2, 0.25, 2, 1, &mut d),
            IkrlStatus::Ok
        );
        let want = dissimilarity(
            3,
            0,
            4,
            &f.params,
            Some(&f.out.features),
            AggregationMode::Max,
            ScoringMode::Union(0.25),
            Norm::L2,
        )
        .unwrap();
        assert_eq!(d, want);

        let mut buf = vec![0.0; 16];
        assert_eq!(
            ikrl_entity_ibr(model, feats, 5, 1, buf.as_mut_ptr(), 16),
            IkrlStatus::Ok
        );
        assert_eq!(
            buf,
            entity_ibr(5, &f.params, &f.out.features, AggregationMode::Avg).unwrap()
        );

        let mut count = 0;
        assert_eq!(
            ikrl_attention(model, feats, 0, ptr::null_mut(), 0, &mut count),
            IkrlStatus::BufferTooSmall
        );
        assert_eq!(count, 5);
        let mut w = vec![0.0; count];
        assert_eq!(
            ikrl_attention(model, feats, 0, w.as_mut_ptr(), w.len(), &mut count),
            IkrlStatus::Ok
        );
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        ikrl_model_free(model);
        ikrl_features_free(feats);
    }
}

#[test]
fn errors_are_reported() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(ikrl_model_load(missing.as_ptr(), &mut model), IkrlStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("nonexistent"));

        // A feature file is not a checkpoint.
        assert_eq!(
            ikrl_model_load(f.features.as_ptr(), &mut model),
            IkrlStatus::Format
        );
        assert_eq!(ikrl_model_load(ptr::null(), &mut model), IkrlStatus::NullPointer);

        let (model, feats) = load(&f);
        assert!(last_error().is_empty());
        let mut out = 0.0;
        assert_eq!(
            ikrl_energy(model, feats, 99, 0, 1, 0, 0, &mut out),
            IkrlStatus::InvalidArgument
        );
        assert_eq!(
            ikrl_energy(model, feats, 0, 0, 1, 7, 0, &mut out),
            IkrlStatus::InvalidArgument
        );
        assert_eq!(
            ikrl_energy(model, ptr::null(), 0, 0, 1, 0, 0, &mut out),
            IkrlStatus::NullPointer
        );
        assert_eq!(
            ikrl_dissimilarity(model, ptr::null(), 0, 0, 1, 1, 0.0, 0, 0, &mut out),
            IkrlStatus::MissingFeatures
        );
        assert_eq!(
            ikrl_dissimilarity(model, feats, 0, 0, 1, 2, 1.5, 0, 0, &mut out),
            IkrlStatus::InvalidArgument
        );
        let mut buf = [0.0; 4];
        assert_eq!(
            ikrl_entity_ibr(model, feats, 0, 0, buf.as_mut_ptr(), 4),
            IkrlStatus::Dimension
        );
        ikrl_model_free(model);
        ikrl_features_free(feats);
        ikrl_model_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(ikrl_version()) }.to_bytes().is_empty());
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps/
    std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

fn have_cc() -> bool {
    Command::new("cc")
        .arg("--version")
        .output()
        .is_ok_and(|o| o.status.success())
}

#[test]
fn header_drives_a_c_program() {
    if !have_cc() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let f = fixture();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let header = include.join("ikrl.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "ikrl_model_load",
        "ikrl_model_free",
        "ikrl_model_dims",
        "ikrl_features_load",
        "ikrl_features_free",
        "ikrl_energy",
        "ikrl_dissimilarity",
        "ikrl_entity_ibr",
        "ikrl_attention",
        "ikrl_last_error_message",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }

    let lib = target_dir().join("libikrl_ffi.a");
    if !lib.exists() {
        eprintln!("skipping link step: {} not built", lib.display());
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "ikrl.h"
int main(int argc, char **argv) {
    IkrlModel *m = NULL; IkrlFeatures *f = NULL;
    if (ikrl_model_load(argv[1], &m) != IKRL_STATUS_OK) return 10;
    if (ikrl_features_load(argv[2], &f) != IKRL_STATUS_OK) return 11;
    double e = 0.0;
    if (ikrl_energy(m, f, 0, 0, 1, IKRL_AGGREGATION_ATT, IKRL_NORM_L1, &e) != IKRL_STATUS_OK) return 12;
    printf("%.17g\n", e);
    if (ikrl_energy(m, f, 1000, 0, 1, IKRL_AGGREGATION_ATT, IKRL_NORM_L1, &e) != IKRL_STATUS_INVALID_ARGUMENT) return 13;
    ikrl_model_free(m); ikrl_features_free(f);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = tmp.path().join("main");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-I"])
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C program failed to build");
    let run = Command::new(&exe)
        .arg(f.checkpoint.to_str().unwrap())
        .arg(f.features.to_str().unwrap())
        .output()
        .unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    let printed: f64 = String::from_utf8_lossy(&run.stdout).trim().parse().unwrap();
    let want = energy(
        0,
        0,
        1,
        &f.params,
        &f.out.features,
        AggregationMode::Att,
        Norm::L1,
    )
    .unwrap()
    .total;
    assert_eq!(printed, want);
}
