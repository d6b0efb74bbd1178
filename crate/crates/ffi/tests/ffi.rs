use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use spair::io::{checkpoint, Config};
use spair::nets::{build_net_l, build_net_r};
use spair_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(spair_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn planar(c: usize, h: usize, w: usize) -> Vec<f32> {
    (0..c * h * w).map(|i| (i * 37 % 256) as f32 / 255.0).collect()
}

#[test]
fn image_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("x.ppm"));
    let data = planar(3, 5, 7);
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(spair_image_from_planar(data.as_ptr(), 3, 5, 7, &mut img), SpairStatus::Ok);
        assert_eq!(spair_image_save(img, path.as_ptr()), SpairStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(spair_image_load(path.as_ptr(), &mut back), SpairStatus::Ok);
        let (mut c, mut h, mut w) = (0, 0, 0);
        assert_eq!(spair_image_dims(back, &mut c, &mut h, &mut w), SpairStatus::Ok);
        assert_eq!((c, h, w), (3, 5, 7));
        let px = std::slice::from_raw_parts(spair_image_data(back), c * h * w);
        assert_eq!(px, &data[..]);
        let mut p = 0.0;
        assert_eq!(spair_psnr(img, back, &mut p), SpairStatus::Ok);
        assert_eq!(p, 99.0);
        spair_image_free(img);
        spair_image_free(back);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(spair_image_load(ptr::null(), &mut img), SpairStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/dir/x.ppm").unwrap();
        assert_eq!(spair_image_load(missing.as_ptr(), &mut img), SpairStatus::Io);
        assert!(img.is_null());
        let data = planar(2, 2, 2);
        assert_eq!(spair_image_from_planar(data.as_ptr(), 2, 2, 2, &mut img), SpairStatus::InvalidArgument);
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(spair_error_reduction(30.75, 32.91, 0.903, 0.926, &mut a, &mut b), SpairStatus::Ok);
        assert!(last_error().is_empty());
        assert!((a - 22.0).abs() < 0.1);
        assert_eq!(
            spair_error_reduction(1.0, 1.0, 0.5, 0.5, ptr::null_mut(), &mut b),
            SpairStatus::NullPointer
        );
        spair_image_free(ptr::null_mut());
        spair_model_free(ptr::null_mut());
        assert!(spair_image_data(ptr::null()).is_null());
        assert!(!CStr::from_ptr(spair_version()).to_bytes().is_empty());
    }
}

#[test]
fn model_restores_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_text = "net.levels = 2\nnet.base_channels = 4\nnet.dense_depth = 1\nnet.growth = 4\nnet.sc_growth = 4\n";
    let cfg_path = dir.path().join("m.cfg");
    std::fs::write(&cfg_path, cfg_text).unwrap();
    let spec = Config::parse(cfg_text).unwrap().train.net;
    let lp = dir.path().join("l.sptn");
    let rp = dir.path().join("r.sptn");
    checkpoint::save(&lp, build_net_l::<f32>(&spec, 1).unwrap().params()).unwrap();
    checkpoint::save(&rp, build_net_r::<f32>(&spec, 1).unwrap().params()).unwrap();

    let data = planar(3, 8, 8);
    unsafe {
        let mut model = ptr::null_mut();
        let (c, l, r) = (cstr(&cfg_path), cstr(&lp), cstr(&rp));
        assert_eq!(spair_model_load(c.as_ptr(), l.as_ptr(), r.as_ptr(), &mut model), SpairStatus::Ok);
        let mut img = ptr::null_mut();
        assert_eq!(spair_image_from_planar(data.as_ptr(), 3, 8, 8, &mut img), SpairStatus::Ok);
        let (mut out, mut mask) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(spair_model_restore(model, img, &mut out, &mut mask), SpairStatus::Ok);
        let (mut cc, mut h, mut w) = (0, 0, 0);
        spair_image_dims(mask, &mut cc, &mut h, &mut w);
        assert_eq!((cc, h, w), (1, 8, 8));
        // the restoration tail starts at zero, so an untrained net is the identity
        let px = std::slice::from_raw_parts(spair_image_data(out), 3 * 64);
        assert_eq!(px, &data[..]);

        let mut odd = ptr::null_mut();
        let small = planar(3, 6, 6);
        spair_image_from_planar(small.as_ptr(), 3, 6, 6, &mut odd);
        let mut o2 = ptr::null_mut();
        assert_eq!(spair_model_restore(model, odd, &mut o2, ptr::null_mut()), SpairStatus::InvalidArgument);
        assert!(!last_error().is_empty());

        // a checkpoint for a different architecture is refused
        let mut other = ptr::null_mut();
        assert_eq!(
            spair_model_load(ptr::null(), l.as_ptr(), r.as_ptr(), &mut other),
            SpairStatus::Structural
        );
        for i in [img, out, mask, odd] {
            spair_image_free(i);
        }
        spair_model_free(model);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/spair.h");
    let text = std::fs::read_to_string(&header).unwrap();
    assert!(text.contains("SpairStatus spair_model_restore("));
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
