//! C interface to `spair`.
//!
//! Every fallible function returns a [`SpairStatus`]; on failure a
//! description is kept per thread and read with [`spair_last_error`].
//! Handles are opaque and must be released with their `_free` function.
//! Image buffers are planar (channel-major) `float` in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spair::io::{checkpoint, pnm, Config};
use spair::metrics;
use spair::nets::{build_net_l, build_net_r, Net};
use spair::tensor::{Shape, Tensor};
use spair::train::restore_image;
use spair::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpairStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Parse = 4,
    Io = 5,
    Config = 6,
    Structural = 7,
    NonFinite = 8,
    EmptyRegion = 9,
    Panic = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SpairStatus {
    match e {
        Error::Shape(_) => SpairStatus::Shape,
        Error::EmptyRegion => SpairStatus::EmptyRegion,
        Error::EmptySoftmax | Error::InvalidArgument(_) => SpairStatus::InvalidArgument,
        Error::Structural(_) => SpairStatus::Structural,
        Error::NonFinite(_) => SpairStatus::NonFinite,
        Error::Parse { .. } => SpairStatus::Parse,
        Error::Config(_) => SpairStatus::Config,
        Error::Io(_) => SpairStatus::Io,
    }
}

struct Fail(SpairStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SpairStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SpairStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpairStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SpairStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(SpairStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

/// Description of the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn spair_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spair_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A decoded PPM or PGM image.
pub struct SpairImage {
    tensor: Tensor<f32>,
}

/// Read a P6 or P5 file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn spair_image_load(path: *const c_char, out: *mut *mut SpairImage) -> SpairStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = path_arg(path, "path")?;
        let tensor = pnm::read_image(&p)?;
        *out = Box::into_raw(Box::new(SpairImage { tensor }));
        Ok(())
    })
}

/// Image from `channels` (1 or 3) planes of `height * width` floats.
///
/// # Safety
/// `data` must point to `channels * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn spair_image_from_planar(
    data: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut *mut SpairImage,
) -> SpairStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if !(channels == 1 || channels == 3) || height == 0 || width == 0 {
            return Err(Fail(
                SpairStatus::InvalidArgument,
                format!("unsupported image {channels}x{height}x{width}"),
            ));
        }
        let len = channels * height * width;
        let v = std::slice::from_raw_parts(data, len).to_vec();
        let tensor = Tensor::from_vec(Shape::new(1, channels, height, width), v)?;
        *out = Box::into_raw(Box::new(SpairImage { tensor }));
        Ok(())
    })
}

/// Release an image. NULL is ignored.
///
/// # Safety
/// `img` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spair_image_free(img: *mut SpairImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

/// Writes channels, height and width of `img`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn spair_image_dims(
    img: *const SpairImage,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> SpairStatus {
    guard(|| {
        let img = img.as_ref().ok_or_else(|| null("img"))?;
        if channels.is_null() || height.is_null() || width.is_null() {
            return Err(null("output dimension"));
        }
        let s = img.tensor.shape();
        *channels = s.c;
        *height = s.h;
        *width = s.w;
        Ok(())
    })
}

/// Planar pixel data of `img`, valid until the image is freed. NULL if
/// `img` is NULL.
///
/// # Safety
/// `img` must be NULL or a live image.
#[no_mangle]
pub unsafe extern "C" fn spair_image_data(img: *const SpairImage) -> *const f32 {
    img.as_ref().map_or(ptr::null(), |i| i.tensor.data().as_ptr())
}

/// Write `img` as P6 (3 channels) or P5 (1 channel).
///
/// # Safety
/// `img` must be a live image and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spair_image_save(img: *const SpairImage, path: *const c_char) -> SpairStatus {
    guard(|| {
        let img = img.as_ref().ok_or_else(|| null("img"))?;
        let p = path_arg(path, "path")?;
        let bytes = if img.tensor.shape().c == 3 {
            pnm::encode_ppm(&img.tensor, 0)?
        } else {
            pnm::encode_pgm(&img.tensor, 0)?
        };
        std::fs::write(&p, bytes).map_err(Error::from)?;
        Ok(())
    })
}

/// A localization network and a restoration network.
pub struct SpairModel {
    net_l: Net<f32>,
    net_r: Net<f32>,
}

fn load_into(path: &std::path::Path, mut net: Net<f32>) -> Result<Net<f32>, Fail> {
    let params = checkpoint::load::<f32>(path)?;
    net.load_params(params)?;
    Ok(net)
}

/// Build both networks from `config_path` (NULL for defaults) and load
/// their checkpoints.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn spair_model_load(
    config_path: *const c_char,
    net_l_path: *const c_char,
    net_r_path: *const c_char,
    out: *mut *mut SpairModel,
) -> SpairStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = if config_path.is_null() {
            Config::default()
        } else {
            Config::load(&path_arg(config_path, "config_path")?)?
        };
        let spec = cfg.train.net;
        let net_l = load_into(&path_arg(net_l_path, "net_l_path")?, build_net_l(&spec, 0)?)?;
        let net_r = load_into(&path_arg(net_r_path, "net_r_path")?, build_net_r(&spec, 0)?)?;
        *out = Box::into_raw(Box::new(SpairModel { net_l, net_r }));
        Ok(())
    })
}

/// Release a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn spair_model_free(model: *mut SpairModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Restore an RGB image. `*restored` receives a new RGB image and `*mask`
/// (if not NULL) the predicted one-channel mask.
///
/// # Safety
/// `model` and `input` must be live handles; output pointers valid or NULL
/// where allowed.
#[no_mangle]
pub unsafe extern "C" fn spair_model_restore(
    model: *const SpairModel,
    input: *const SpairImage,
    restored: *mut *mut SpairImage,
    mask: *mut *mut SpairImage,
) -> SpairStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let input = input.as_ref().ok_or_else(|| null("input"))?;
        if restored.is_null() {
            return Err(null("restored"));
        }
        let (out, pred) = restore_image(&model.net_l, &model.net_r, &input.tensor, None)?;
        *restored = Box::into_raw(Box::new(SpairImage { tensor: out }));
        if !mask.is_null() {
            *mask = Box::into_raw(Box::new(SpairImage {
                tensor: pred.to_tensor(),
            }));
        }
        Ok(())
    })
}

/// PSNR in dB of `a` against `b` for peak value 1.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn spair_psnr(a: *const SpairImage, b: *const SpairImage, out: *mut f64) -> SpairStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = metrics::psnr(&a.tensor, &b.tensor, 1.0, None)?;
        Ok(())
    })
}

/// Relative reduction, in percent, of RMSE and of DSSIM when going from the
/// reference method to another, given their PSNRs (dB) and SSIMs.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn spair_error_reduction(
    psnr_ref: f64,
    psnr_method: f64,
    ssim_ref: f64,
    ssim_method: f64,
    rmse_reduction_pct: *mut f64,
    dssim_reduction_pct: *mut f64,
) -> SpairStatus {
    guard(|| {
        if rmse_reduction_pct.is_null() || dssim_reduction_pct.is_null() {
            return Err(null("output"));
        }
        let (r, d) = metrics::error_reduction(psnr_ref, psnr_method, ssim_ref, ssim_method);
        *rmse_reduction_pct = r;
        *dssim_reduction_pct = d;
        Ok(())
    })
}
