use std::ffi::{c_char, CString};
use std::ptr;

use sgmc::config::RunConfig;
use sgmc::network::Model;
use sgmc_ffi::*;

fn last_error() -> String {
    unsafe {
        let n = sgmc_last_error(ptr::null_mut(), 0);
        let mut buf = vec![0 as c_char; n + 1];
        sgmc_last_error(buf.as_mut_ptr(), buf.len());
        let bytes: Vec<u8> = buf[..n].iter().map(|&c| c as u8).collect();
        String::from_utf8(bytes).unwrap()
    }
}

fn small_spec() -> SgmcSyntheticSpec {
    SgmcSyntheticSpec {
        n_clips: 6,
        n_subjects: 4,
        n_channels: 3,
        n_times: 16,
        seed: 11,
        ..sgmc_synthetic_spec_default()
    }
}

fn generate(spec: &SgmcSyntheticSpec) -> *mut SgmcCorpus {
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { sgmc_corpus_generate(spec, &mut c) }, SgmcStatus::Ok);
    assert!(!c.is_null());
    c
}

#[test]
fn corpus_generate_read_write() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("c.sgmc").to_str().unwrap()).unwrap();
    unsafe {
        let c = generate(&small_spec());
        let mut dims = SgmcCorpusDims::default();
        assert_eq!(sgmc_corpus_dims(c, &mut dims), SgmcStatus::Ok);
        assert_eq!(
            dims,
            SgmcCorpusDims {
                n_clips: 6,
                n_subjects: 4,
                n_channels: 3,
                n_times: 16,
                n_classes: 2
            }
        );
        assert_eq!(sgmc_corpus_write(c, path.as_ptr()), SgmcStatus::Ok);

        let mut d = ptr::null_mut();
        assert_eq!(sgmc_corpus_read(path.as_ptr(), &mut d), SgmcStatus::Ok);
        let mut w1 = vec![0f32; 48];
        let mut w2 = vec![0f32; 48];
        for clip in 0..6 {
            for subject in 0..4 {
                assert_eq!(sgmc_corpus_window(c, clip, subject, w1.as_mut_ptr(), 48), SgmcStatus::Ok);
                assert_eq!(sgmc_corpus_window(d, clip, subject, w2.as_mut_ptr(), 48), SgmcStatus::Ok);
                assert_eq!(w1, w2);
            }
            let (mut l1, mut l2) = (9u32, 8u32);
            assert_eq!(sgmc_corpus_label(c, clip, &mut l1), SgmcStatus::Ok);
            assert_eq!(sgmc_corpus_label(d, clip, &mut l2), SgmcStatus::Ok);
            assert_eq!(l1, l2);
        }
        sgmc_corpus_free(c);
        sgmc_corpus_free(d);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let c = generate(&small_spec());
        let mut w = vec![0f32; 47];
        assert_eq!(sgmc_corpus_window(c, 0, 0, w.as_mut_ptr(), 47), SgmcStatus::BufferTooSmall);
        assert!(last_error().contains("need 48"), "{}", last_error());
        assert_eq!(sgmc_corpus_window(c, 6, 0, w.as_mut_ptr(), 47), SgmcStatus::InvalidArgument);
        assert_eq!(sgmc_corpus_dims(c, ptr::null_mut()), SgmcStatus::NullPointer);
        let mut dims = SgmcCorpusDims::default();
        assert_eq!(sgmc_corpus_dims(c, &mut dims), SgmcStatus::Ok);
        assert_eq!(last_error(), "");
        sgmc_corpus_free(c);

        let bad = SgmcSyntheticSpec {
            n_clips: 0,
            ..small_spec()
        };
        let mut out = ptr::null_mut();
        assert_eq!(sgmc_corpus_generate(&bad, &mut out), SgmcStatus::Config);
        assert!(out.is_null());

        let missing = CString::new("/nonexistent/corpus.sgmc").unwrap();
        assert_eq!(sgmc_corpus_read(missing.as_ptr(), &mut out), SgmcStatus::Io);
        assert!(last_error().contains("/nonexistent/corpus.sgmc"));

        sgmc_corpus_free(ptr::null_mut());
        sgmc_model_free(ptr::null_mut());
    }
}

#[test]
fn error_message_truncates() {
    unsafe {
        assert_eq!(sgmc_corpus_dims(ptr::null(), ptr::null_mut()), SgmcStatus::NullPointer);
        let full = last_error();
        let mut buf = [1 as c_char; 4];
        assert_eq!(sgmc_last_error(buf.as_mut_ptr(), 4), full.len());
        assert_eq!(buf[3], 0);
        assert_eq!(buf[0] as u8, full.as_bytes()[0]);
    }
}

#[test]
fn crossover_swaps_prefixes() {
    let a: Vec<f32> = (0..2 * 8).map(|i| i as f32).collect();
    let b: Vec<f32> = (0..2 * 8).map(|i| -(i as f32) - 1.0).collect();
    let mut xa = vec![0f32; 16];
    let mut xb = vec![0f32; 16];
    unsafe {
        assert_eq!(
            sgmc_crossover(a.as_ptr(), b.as_ptr(), 2, 8, 3, xa.as_mut_ptr(), xb.as_mut_ptr()),
            SgmcStatus::Ok
        );
    }
    for ch in 0..2 {
        for t in 0..8 {
            let i = ch * 8 + t;
            let (pa, pb) = if t < 3 { (b[i], a[i]) } else { (a[i], b[i]) };
            assert_eq!((xa[i], xb[i]), (pa, pb));
        }
    }
    unsafe {
        assert_eq!(
            sgmc_crossover(a.as_ptr(), b.as_ptr(), 2, 8, 7, xa.as_mut_ptr(), xb.as_mut_ptr()),
            SgmcStatus::InvalidArgument
        );
    }
}

#[test]
fn loss_matches_library() {
    let za = [1.0, 0.0, 0.0, 1.0];
    let zb = [1.0, 0.1, 0.2, 1.0];
    let mut got = 0.0;
    unsafe {
        assert_eq!(sgmc_group_ntxent_loss(za.as_ptr(), zb.as_ptr(), 2, 2, 0.5, &mut got), SgmcStatus::Ok);
    }
    let t = |d: &[f64]| sgmc::numerics::Tensor::new(vec![2, 2], d.to_vec()).unwrap();
    let want = sgmc::objective::group_ntxent_loss(&t(&za), &t(&zb), &sgmc::objective::LossConfig { temperature: 0.5 })
        .unwrap();
    assert_eq!(got, want);
    unsafe {
        assert_eq!(sgmc_group_ntxent_loss(za.as_ptr(), zb.as_ptr(), 2, 2, 0.0, &mut got), SgmcStatus::Config);
    }
}

#[test]
fn model_encodes_and_projects() {
    let run = RunConfig::profile("desk").unwrap();
    let model: Model<f32> = Model::new(run.model_config().unwrap(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.ckpt");
    model.to_checkpoint(String::new(), None).write(&file).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();

    let spec = run.synthetic_spec();
    let (c, m) = (spec.n_channels, spec.n_times);
    let windows: Vec<f32> = (0..3 * c * m).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(sgmc_model_load(path.as_ptr(), &mut h), SgmcStatus::Ok);
        let (mut d, mut hd) = (0usize, 0usize);
        assert_eq!(sgmc_model_representation_dim(h, &mut d), SgmcStatus::Ok);
        assert_eq!(sgmc_model_output_dim(h, &mut hd), SgmcStatus::Ok);
        assert_eq!(d, model.representation_dim());
        assert_eq!(hd, model.config.projector.output_dim());

        let mut reps = vec![0f32; 3 * d];
        assert_eq!(sgmc_model_encode(h, windows.as_ptr(), 3, c, m, reps.as_mut_ptr(), reps.len()), SgmcStatus::Ok);
        let samples: Vec<_> = windows
            .chunks(c * m)
            .map(|w| {
                sgmc::corpus::EegSample::new(c, m, w.to_vec(), 0, sgmc::corpus::SubjectTag::Single(0)).unwrap()
            })
            .collect();
        assert_eq!(reps, model.encode_samples(&samples).unwrap().data());

        let mut z = vec![0f32; hd];
        assert_eq!(sgmc_model_project_group(h, reps.as_ptr(), 3, z.as_mut_ptr(), hd), SgmcStatus::Ok);
        let mut swapped = reps[d..2 * d].to_vec();
        swapped.extend_from_slice(&reps[..d]);
        swapped.extend_from_slice(&reps[2 * d..]);
        let mut z2 = vec![0f32; hd];
        assert_eq!(sgmc_model_project_group(h, swapped.as_ptr(), 3, z2.as_mut_ptr(), hd), SgmcStatus::Ok);
        for (x, y) in z.iter().zip(&z2) {
            assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()), "{x} vs {y}");
        }
        sgmc_model_free(h);
    }
}
