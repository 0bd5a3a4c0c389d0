use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use rescuenet::data::load_dataset;
use rescuenet::model::ModelConfig;
use rescuenet::train::{save_checkpoint, TrainConfig, Trainer};
use rescuenet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(rn_last_error()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn reference_example_score() {
    unsafe {
        let mut cm = ptr::null_mut();
        assert_eq!(rn_confusion_new(&mut cm), RnStatus::Ok);
        let gt = [0u8, 1, 1, 2];
        let pred = [0u8, 1, 2, 2];
        assert_eq!(
            rn_confusion_accumulate(cm, gt.as_ptr(), pred.as_ptr(), 4),
            RnStatus::Ok
        );
        let mut other = ptr::null_mut();
        rn_confusion_new(&mut other);
        let ignored = [255u8, 0];
        let any = [3u8, 0];
        assert_eq!(
            rn_confusion_accumulate(other, ignored.as_ptr(), any.as_ptr(), 2),
            RnStatus::Ok
        );
        assert_eq!(rn_confusion_merge(cm, other), RnStatus::Ok);
        let mut s = RnScore::default();
        assert_eq!(rn_confusion_score(cm, &mut s), RnStatus::Ok);
        assert_eq!(s.n_pixels, 5);
        assert_eq!(s.f1_loc, 1.0);
        assert!((s.f1_damage[0] - 2.0 / 3.0).abs() < 1e-12);
        rn_confusion_free(cm);
        rn_confusion_free(other);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut cm = ptr::null_mut();
        rn_confusion_new(&mut cm);
        let gt = [9u8];
        let status = rn_confusion_accumulate(cm, gt.as_ptr(), gt.as_ptr(), 1);
        assert_eq!(status, RnStatus::InvalidArgument);
        assert!(last_error().contains("out of range"), "{}", last_error());
        assert_eq!(
            rn_confusion_accumulate(cm, ptr::null(), gt.as_ptr(), 1),
            RnStatus::InvalidArgument
        );
        rn_confusion_free(cm);
        assert_eq!(rn_confusion_new(ptr::null_mut()), RnStatus::InvalidArgument);

        let mut model = ptr::null_mut();
        let missing = CString::new("/nonexistent/model.ckpt").unwrap();
        assert_eq!(rn_model_load(missing.as_ptr(), &mut model), RnStatus::Io);
        assert!(model.is_null());
        rn_model_free(model);
    }
}

#[test]
fn generate_load_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let c_data = CString::new(data.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(rn_generate_dataset(c_data.as_ptr(), 2, 3, 32), RnStatus::Ok);
        assert_eq!(
            rn_generate_dataset(c_data.as_ptr(), 1, 3, 30),
            RnStatus::Config
        );
    }
    let pairs = load_dataset(&data).unwrap();
    assert_eq!(pairs.len(), 2);

    let trainer = Trainer::new(ModelConfig::default(), TrainConfig::default()).unwrap();
    let ckpt_path = dir.path().join("m.ckpt");
    save_checkpoint(&trainer.checkpoint(), &ckpt_path).unwrap();
    let expected = trainer
        .net
        .predict(
            &pairs[0].pre.to_tensor().reshape([1, 3, 32, 32]).unwrap(),
            &pairs[0].post.to_tensor().reshape([1, 3, 32, 32]).unwrap(),
            Default::default(),
        )
        .unwrap();

    let c_ckpt = CString::new(ckpt_path.to_str().unwrap()).unwrap();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(
            rn_model_load(c_ckpt.as_ptr(), &mut model),
            RnStatus::Ok,
            "{}",
            last_error()
        );
        let pre = pairs[0].pre.to_tensor().into_data();
        let post = pairs[0].post.to_tensor().into_data();
        let mut out = vec![0u8; 32 * 32];
        let status = rn_model_predict(
            model,
            pre.as_ptr(),
            post.as_ptr(),
            1,
            32,
            32,
            RnFusion::MeanLogprob,
            out.as_mut_ptr(),
        );
        assert_eq!(status, RnStatus::Ok, "{}", last_error());
        assert_eq!(out, expected[0].data());
        let status = rn_model_predict(
            model,
            pre.as_ptr(),
            post.as_ptr(),
            1,
            12,
            12,
            RnFusion::SegOnly,
            out.as_mut_ptr(),
        );
        assert_ne!(status, RnStatus::Ok);
        rn_model_free(model);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(rn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"rescuenet.h\"\nint main(void) { RnScore s; RnConfusion *c = 0; \
         return rn_confusion_score(c, &s) == RN_STATUS_OK; }\n",
    )
    .unwrap();
    let status = match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&header)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler available; skipping");
            return;
        }
    };
    assert!(status.success());
}
