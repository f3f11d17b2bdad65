//! C ABI for the point cloud attribute codec.
//!
//! Clouds and parameter sets are opaque handles; every call returns a
//! status code and leaves a thread-local message retrievable with
//! [`pcac_last_error_message`]. Buffers returned by the encoder must be
//! released with [`pcac_buffer_free`], handles with their `_free`
//! functions. The generated header lands in `include/pcac.h`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::{c_char, size_t};

use pcac::cloud_io;
use pcac::codec::{decode_bitstream, encode_cloud, EncodeOptions};
use pcac::coding::params::{load_params, save_params, ModelParams};
use pcac::error::Error;
use pcac::predictor::PredictorKind;
use pcac::VoxelizedCloud;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Geometry = 5,
    DecodeError = 6,
    Numeric = 7,
    Internal = 8,
}

/// Opaque voxelized point cloud.
pub struct PcacCloud(VoxelizedCloud);

/// Opaque model parameter set.
pub struct PcacParams(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> PcacStatus {
    match err {
        Error::Io { .. } => PcacStatus::Io,
        Error::PlyParse { .. } | Error::ParamsSchema { .. } => PcacStatus::Parse,
        Error::Geometry(_) => PcacStatus::Geometry,
        Error::Decode { .. } => PcacStatus::DecodeError,
        Error::Conditioning { .. } | Error::ZeroDegree { .. } | Error::Training(_) => {
            PcacStatus::Numeric
        }
        Error::CoordinateRange { .. }
        | Error::ChannelCount { .. }
        | Error::Shape(_)
        | Error::Parameter(_)
        | Error::EmptyInput(_)
        | Error::Data(_) => PcacStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> PcacStatus) -> PcacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            PcacStatus::Internal
        }
    }
}

fn complete<T>(
    result: Result<T, Error>,
    sink: impl FnOnce(T) -> PcacStatus,
) -> PcacStatus {
    match result {
        Ok(v) => sink(v),
        Err(e) => {
            let status = status_of(&e);
            set_error(&e.to_string());
            status
        }
    }
}

unsafe fn path_arg(ptr: *const c_char) -> Result<PathBuf, PcacStatus> {
    if ptr.is_null() {
        set_error("null path");
        return Err(PcacStatus::NullPointer);
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(PcacStatus::InvalidArgument)
        }
    }
}

/// Message of the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pcac_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a PLY file (`x,y,z` and `red,green,blue`) as a cloud with the
/// given octree depth.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_load_ply(
    path: *const c_char,
    depth: u8,
    out: *mut *mut PcacCloud,
) -> PcacStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PcacStatus::NullPointer;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        complete(cloud_io::load_ply(path, depth), |cloud| {
            *out = Box::into_raw(Box::new(PcacCloud(cloud)));
            PcacStatus::Ok
        })
    })
}

/// Writes a cloud as binary PLY with 8-bit colors.
///
/// # Safety
/// `cloud` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_write_ply(
    cloud: *const PcacCloud,
    path: *const c_char,
) -> PcacStatus {
    guard(|| {
        if cloud.is_null() {
            set_error("null cloud");
            return PcacStatus::NullPointer;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        complete(cloud_io::write_ply(&(*cloud).0, path), |_| PcacStatus::Ok)
    })
}

/// Converts colors to the analysis space (BT.709 full-range YUV).
///
/// # Safety
/// `cloud` must be a live handle; `out` receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_rgb_to_yuv(
    cloud: *const PcacCloud,
    out: *mut *mut PcacCloud,
) -> PcacStatus {
    guard(|| {
        if cloud.is_null() || out.is_null() {
            set_error("null argument");
            return PcacStatus::NullPointer;
        }
        complete(cloud_io::rgb_to_yuv(&(*cloud).0), |c| {
            *out = Box::into_raw(Box::new(PcacCloud(c)));
            PcacStatus::Ok
        })
    })
}

/// Inverse of [`pcac_cloud_rgb_to_yuv`].
///
/// # Safety
/// `cloud` must be a live handle; `out` receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_yuv_to_rgb(
    cloud: *const PcacCloud,
    out: *mut *mut PcacCloud,
) -> PcacStatus {
    guard(|| {
        if cloud.is_null() || out.is_null() {
            set_error("null argument");
            return PcacStatus::NullPointer;
        }
        complete(cloud_io::yuv_to_rgb(&(*cloud).0), |c| {
            *out = Box::into_raw(Box::new(PcacCloud(c)));
            PcacStatus::Ok
        })
    })
}

/// Number of occupied voxels.
///
/// # Safety
/// `cloud` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_point_count(cloud: *const PcacCloud) -> size_t {
    if cloud.is_null() {
        return 0;
    }
    (*cloud).0.len()
}

/// Octree depth in bits per axis.
///
/// # Safety
/// `cloud` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_depth(cloud: *const PcacCloud) -> u8 {
    if cloud.is_null() {
        return 0;
    }
    (*cloud).0.depth
}

/// Releases a cloud handle. Null is ignored.
///
/// # Safety
/// `cloud` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pcac_cloud_free(cloud: *mut PcacCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Default model parameters for a depth/root-level pair; `predictor` is
/// one of `none`, `linear`, `gpcc`, `pbf`.
///
/// # Safety
/// `predictor` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcac_params_default(
    depth: u8,
    root_level: u8,
    predictor: *const c_char,
    out: *mut *mut PcacParams,
) -> PcacStatus {
    guard(|| {
        if out.is_null() || predictor.is_null() {
            set_error("null argument");
            return PcacStatus::NullPointer;
        }
        let kind: PredictorKind = match CStr::from_ptr(predictor)
            .to_str()
            .map_err(|_| ())
            .and_then(|s| s.parse().map_err(|_| ()))
        {
            Ok(k) => k,
            Err(()) => {
                set_error("predictor must be none|linear|gpcc|pbf");
                return PcacStatus::InvalidArgument;
            }
        };
        if root_level >= depth {
            set_error("root_level must be below depth");
            return PcacStatus::InvalidArgument;
        }
        *out = Box::into_raw(Box::new(PcacParams(ModelParams::defaults(
            depth, root_level, kind,
        ))));
        PcacStatus::Ok
    })
}

/// Loads a parameters JSON file.
///
/// # Safety
/// `path` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcac_params_load(
    path: *const c_char,
    out: *mut *mut PcacParams,
) -> PcacStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PcacStatus::NullPointer;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        complete(load_params(path), |p| {
            *out = Box::into_raw(Box::new(PcacParams(p)));
            PcacStatus::Ok
        })
    })
}

/// Saves parameters as JSON.
///
/// # Safety
/// `params` must be a live handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn pcac_params_save(
    params: *const PcacParams,
    path: *const c_char,
) -> PcacStatus {
    guard(|| {
        if params.is_null() {
            set_error("null params");
            return PcacStatus::NullPointer;
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        complete(save_params(&(*params).0, path), |_| PcacStatus::Ok)
    })
}

/// Releases a parameters handle. Null is ignored.
///
/// # Safety
/// `params` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pcac_params_free(params: *mut PcacParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Encodes a cloud into a freshly allocated bitstream buffer. A positive
/// `delta` overrides the quantizer step from the parameters.
///
/// # Safety
/// `cloud` and `params` must be live handles; `out_data` and `out_len`
/// valid pointers. The buffer must be released with [`pcac_buffer_free`].
#[no_mangle]
pub unsafe extern "C" fn pcac_encode(
    cloud: *const PcacCloud,
    params: *const PcacParams,
    delta: f64,
    out_data: *mut *mut u8,
    out_len: *mut size_t,
) -> PcacStatus {
    guard(|| {
        if cloud.is_null() || params.is_null() || out_data.is_null() || out_len.is_null() {
            set_error("null argument");
            return PcacStatus::NullPointer;
        }
        let options = EncodeOptions {
            step_override: (delta > 0.0).then_some(delta),
            predictor_override: None,
        };
        complete(encode_cloud(&(*cloud).0, &(*params).0, &options), |res| {
            let mut bytes = res.bytes.into_boxed_slice();
            *out_len = bytes.len();
            *out_data = bytes.as_mut_ptr();
            std::mem::forget(bytes);
            PcacStatus::Ok
        })
    })
}

/// Releases a buffer returned by [`pcac_encode`].
///
/// # Safety
/// `data`/`len` must be exactly what the encoder returned.
#[no_mangle]
pub unsafe extern "C" fn pcac_buffer_free(data: *mut u8, len: size_t) {
    if !data.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(data, len)));
    }
}

/// Decodes a bitstream against its geometry cloud (attribute values of the
/// geometry are ignored); the reconstructed cloud is returned in `out`.
///
/// # Safety
/// `data` must point to `len` readable bytes, `geometry` and `params` must
/// be live handles, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pcac_decode(
    data: *const u8,
    len: size_t,
    geometry: *const PcacCloud,
    params: *const PcacParams,
    out: *mut *mut PcacCloud,
) -> PcacStatus {
    guard(|| {
        if data.is_null() || geometry.is_null() || params.is_null() || out.is_null() {
            set_error("null argument");
            return PcacStatus::NullPointer;
        }
        let bytes = std::slice::from_raw_parts(data, len);
        complete(
            decode_bitstream(bytes, &(*geometry).0, &(*params).0),
            |res| {
                *out = Box::into_raw(Box::new(PcacCloud(res.cloud)));
                PcacStatus::Ok
            },
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c_path(p: &std::path::Path) -> CString {
        CString::new(p.to_str().unwrap()).unwrap()
    }

    fn sample_ply(dir: &std::path::Path) -> std::path::PathBuf {
        let mut body = String::new();
        let mut count = 0;
        for x in 0..8u32 {
            for y in 0..8u32 {
                let z = (x + y) % 8;
                body.push_str(&format!("{x} {y} {z} {} {} {}\n", x * 30, y * 30, 128));
                count += 1;
            }
        }
        let text = format!(
            "ply\nformat ascii 1.0\nelement vertex {count}\n\
             property float x\nproperty float y\nproperty float z\n\
             property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n{body}"
        );
        let path = dir.join("sample.ply");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn c_api_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ply = sample_ply(dir.path());

        unsafe {
            let mut cloud: *mut PcacCloud = std::ptr::null_mut();
            assert_eq!(
                pcac_cloud_load_ply(c_path(&ply).as_ptr(), 3, &mut cloud),
                PcacStatus::Ok
            );
            assert_eq!(pcac_cloud_point_count(cloud), 64);
            assert_eq!(pcac_cloud_depth(cloud), 3);

            let mut yuv: *mut PcacCloud = std::ptr::null_mut();
            assert_eq!(pcac_cloud_rgb_to_yuv(cloud, &mut yuv), PcacStatus::Ok);

            let mut params: *mut PcacParams = std::ptr::null_mut();
            let kind = CString::new("linear").unwrap();
            assert_eq!(
                pcac_params_default(3, 1, kind.as_ptr(), &mut params),
                PcacStatus::Ok
            );

            let mut data: *mut u8 = std::ptr::null_mut();
            let mut len: usize = 0;
            assert_eq!(
                pcac_encode(yuv, params, 2.0, &mut data, &mut len),
                PcacStatus::Ok
            );
            assert!(len > 0);

            let mut decoded: *mut PcacCloud = std::ptr::null_mut();
            assert_eq!(
                pcac_decode(data, len, yuv, params, &mut decoded),
                PcacStatus::Ok
            );
            assert_eq!(pcac_cloud_point_count(decoded), 64);
            for (a, b) in (*decoded).0.attributes.iter().zip(&(*yuv).0.attributes) {
                assert!((a - b).abs() <= 1.0 + 1e-9);
            }

            let mut rgb: *mut PcacCloud = std::ptr::null_mut();
            assert_eq!(pcac_cloud_yuv_to_rgb(decoded, &mut rgb), PcacStatus::Ok);
            let out = dir.path().join("decoded.ply");
            assert_eq!(
                pcac_cloud_write_ply(rgb, c_path(&out).as_ptr()),
                PcacStatus::Ok
            );
            assert!(out.exists());

            pcac_buffer_free(data, len);
            pcac_cloud_free(cloud);
            pcac_cloud_free(yuv);
            pcac_cloud_free(decoded);
            pcac_cloud_free(rgb);
            pcac_params_free(params);
        }
    }

    #[test]
    fn errors_set_status_and_message() {
        unsafe {
            let mut cloud: *mut PcacCloud = std::ptr::null_mut();
            let missing = CString::new("/nonexistent/file.ply").unwrap();
            assert_eq!(
                pcac_cloud_load_ply(missing.as_ptr(), 4, &mut cloud),
                PcacStatus::Io
            );
            let msg = CStr::from_ptr(pcac_last_error_message());
            assert!(!msg.to_bytes().is_empty());

            assert_eq!(
                pcac_cloud_load_ply(std::ptr::null(), 4, &mut cloud),
                PcacStatus::NullPointer
            );

            let mut params: *mut PcacParams = std::ptr::null_mut();
            let bad = CString::new("magic").unwrap();
            assert_eq!(
                pcac_params_default(6, 2, bad.as_ptr(), &mut params),
                PcacStatus::InvalidArgument
            );

            // wrong geometry for a stream
            let dir = tempfile::tempdir().unwrap();
            let ply = sample_ply(dir.path());
            let mut a: *mut PcacCloud = std::ptr::null_mut();
            pcac_cloud_load_ply(c_path(&ply).as_ptr(), 3, &mut a);
            let kind = CString::new("none").unwrap();
            pcac_params_default(3, 1, kind.as_ptr(), &mut params);
            let mut data: *mut u8 = std::ptr::null_mut();
            let mut len: usize = 0;
            assert_eq!(pcac_encode(a, params, 1.0, &mut data, &mut len), PcacStatus::Ok);
            // corrupt the magic
            *data ^= 0xff;
            let mut decoded: *mut PcacCloud = std::ptr::null_mut();
            assert_eq!(
                pcac_decode(data, len, a, params, &mut decoded),
                PcacStatus::DecodeError
            );
            pcac_buffer_free(data, len);
            pcac_cloud_free(a);
            pcac_params_free(params);
        }
    }
}
