//! C ABI over the sgmc library.
//!
//! Every function returns an [`SgmcStatus`]. On failure the message is kept
//! per thread and read back with [`sgmc_last_error`]. Corpora and models
//! cross the boundary as opaque handles that the caller releases with the
//! matching `_free` function. Array arguments are row-major and sized by the
//! accompanying length arguments.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sgmc::corpus::{generate_synthetic_corpus, read_corpus, write_corpus, Corpus, EegSample, SubjectTag, SyntheticSpec};
use sgmc::grouping::crossover;
use sgmc::network::{Checkpoint, Model};
use sgmc::numerics::Tensor;
use sgmc::objective::{group_ntxent_loss, LossConfig};
use sgmc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SgmcStatus {
    Ok = 0,
    NullPointer = 1,
    /// An argument broke a precondition (index out of range, bad split).
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    /// A zero-norm channel or representation.
    Degenerate = 7,
    Divergence = 8,
    /// The output buffer is shorter than the result.
    BufferTooSmall = 9,
    Panic = 10,
}

/// A loaded or generated corpus.
pub struct SgmcCorpus {
    inner: Corpus,
}

/// A trained encoder and projector, in eval mode.
pub struct SgmcModel {
    inner: Model<f32>,
}

/// Parameters of the synthetic corpus generator.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgmcSyntheticSpec {
    pub n_clips: usize,
    pub n_subjects: usize,
    pub n_channels: usize,
    pub n_times: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    pub components: usize,
    pub band_start: f64,
    pub band_width: f64,
    pub band_gap: f64,
    pub mixing_scale: f64,
    pub offset_scale: f64,
    pub background: f64,
    pub noise: f64,
    pub seed: u64,
}

impl From<SyntheticSpec> for SgmcSyntheticSpec {
    fn from(s: SyntheticSpec) -> Self {
        Self {
            n_clips: s.n_clips,
            n_subjects: s.n_subjects,
            n_channels: s.n_channels,
            n_times: s.n_times,
            n_classes: s.n_classes,
            latent_dim: s.latent_dim,
            components: s.components,
            band_start: s.band_start,
            band_width: s.band_width,
            band_gap: s.band_gap,
            mixing_scale: s.mixing_scale,
            offset_scale: s.offset_scale,
            background: s.background,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

impl From<SgmcSyntheticSpec> for SyntheticSpec {
    fn from(s: SgmcSyntheticSpec) -> Self {
        Self {
            n_clips: s.n_clips,
            n_subjects: s.n_subjects,
            n_channels: s.n_channels,
            n_times: s.n_times,
            n_classes: s.n_classes,
            latent_dim: s.latent_dim,
            components: s.components,
            band_start: s.band_start,
            band_width: s.band_width,
            band_gap: s.band_gap,
            mixing_scale: s.mixing_scale,
            offset_scale: s.offset_scale,
            background: s.background,
            noise: s.noise,
            seed: s.seed,
        }
    }
}

/// Extents of a corpus. `n_classes` is 0 when the corpus has no labels.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SgmcCorpusDims {
    pub n_clips: usize,
    pub n_subjects: usize,
    pub n_channels: usize,
    pub n_times: usize,
    pub n_classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(SgmcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => SgmcStatus::Shape,
            Error::Contract(_) => SgmcStatus::InvalidArgument,
            Error::Config(_) => SgmcStatus::Config,
            Error::DegenerateChannel { .. } | Error::DegenerateRepresentation { .. } => SgmcStatus::Degenerate,
            Error::Format { .. } => SgmcStatus::Format,
            Error::Divergence { .. } => SgmcStatus::Divergence,
            Error::Io { .. } => SgmcStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn fail(status: SgmcStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> SgmcStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => (SgmcStatus::Ok, String::new()),
        Ok(Err(Failure(s, m))) => (s, m),
        Err(payload) => {
            let m = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (SgmcStatus::Panic, format!("panic: {m}"))
        }
    };
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
    status
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| fail(SgmcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| fail(SgmcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(SgmcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> FfiResult<&'a mut [T]> {
    if len < needed {
        return Err(fail(SgmcStatus::BufferTooSmall, format!("{what} holds {len} values, need {needed}")));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(SgmcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn path_arg(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(fail(SgmcStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SgmcStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn dims_product(parts: &[usize], what: &str) -> FfiResult<usize> {
    parts
        .iter()
        .try_fold(1usize, |acc, &x| acc.checked_mul(x))
        .ok_or_else(|| fail(SgmcStatus::InvalidArgument, format!("{what} size overflows")))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating to `len - 1` bytes. Returns the full
/// message length in bytes, excluding the terminator. `buf` may be null to
/// query the length. The message is empty after a successful call.
#[no_mangle]
pub unsafe extern "C" fn sgmc_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// The generator defaults.
#[no_mangle]
pub extern "C" fn sgmc_synthetic_spec_default() -> SgmcSyntheticSpec {
    SyntheticSpec::default().into()
}

/// Generates a labelled synthetic corpus. The caller owns `*out`.
#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_generate(spec: *const SgmcSyntheticSpec, out: *mut *mut SgmcCorpus) -> SgmcStatus {
    guard(|| {
        let spec = SyntheticSpec::from(*borrow(spec, "spec")?);
        let slot = out_ptr(out, "out")?;
        let corpus = generate_synthetic_corpus(&spec)?;
        *slot = Box::into_raw(Box::new(SgmcCorpus { inner: corpus }));
        Ok(())
    })
}

/// Reads a corpus file and its metadata sidecar. The caller owns `*out`.
#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_read(path: *const c_char, out: *mut *mut SgmcCorpus) -> SgmcStatus {
    guard(|| {
        let path = path_arg(path)?;
        let slot = out_ptr(out, "out")?;
        let corpus = read_corpus(&path)?;
        *slot = Box::into_raw(Box::new(SgmcCorpus { inner: corpus }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_write(corpus: *const SgmcCorpus, path: *const c_char) -> SgmcStatus {
    guard(|| {
        let corpus = borrow(corpus, "corpus")?;
        let path = path_arg(path)?;
        write_corpus(&corpus.inner, &path)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_dims(corpus: *const SgmcCorpus, out: *mut SgmcCorpusDims) -> SgmcStatus {
    guard(|| {
        let c = &borrow(corpus, "corpus")?.inner;
        *out_ptr(out, "out")? = SgmcCorpusDims {
            n_clips: c.n_clips(),
            n_subjects: c.n_subjects(),
            n_channels: c.n_channels(),
            n_times: c.n_times(),
            n_classes: c.n_classes(),
        };
        Ok(())
    })
}

/// Copies the `[C, M]` window of one clip and subject into `out`.
#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_window(
    corpus: *const SgmcCorpus,
    clip: usize,
    subject: usize,
    out: *mut f32,
    out_len: usize,
) -> SgmcStatus {
    guard(|| {
        let c = &borrow(corpus, "corpus")?.inner;
        if clip >= c.n_clips() || subject >= c.n_subjects() {
            return Err(fail(
                SgmcStatus::InvalidArgument,
                format!("window ({clip}, {subject}) outside {} clips x {} subjects", c.n_clips(), c.n_subjects()),
            ));
        }
        let w = c.window(clip, subject);
        output(out, out_len, w.len(), "out")?.copy_from_slice(w);
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_label(corpus: *const SgmcCorpus, clip: usize, out: *mut u32) -> SgmcStatus {
    guard(|| {
        let c = &borrow(corpus, "corpus")?.inner;
        let labels = c
            .labels()
            .ok_or_else(|| fail(SgmcStatus::InvalidArgument, "corpus has no labels"))?;
        let label = *labels
            .get(clip)
            .ok_or_else(|| fail(SgmcStatus::InvalidArgument, format!("clip {clip} outside {} clips", c.n_clips())))?;
        *out_ptr(out, "out")? = label;
        Ok(())
    })
}

/// Releases a corpus. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sgmc_corpus_free(corpus: *mut SgmcCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads a model from a checkpoint file. The caller owns `*out`.
#[no_mangle]
pub unsafe extern "C" fn sgmc_model_load(path: *const c_char, out: *mut *mut SgmcModel) -> SgmcStatus {
    guard(|| {
        let path = path_arg(path)?;
        let slot = out_ptr(out, "out")?;
        let (model, _) = Model::from_checkpoint(&Checkpoint::read(&path)?)?;
        *slot = Box::into_raw(Box::new(SgmcModel { inner: model }));
        Ok(())
    })
}

/// Width `D` of the encoder representation.
#[no_mangle]
pub unsafe extern "C" fn sgmc_model_representation_dim(model: *const SgmcModel, out: *mut usize) -> SgmcStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        *out_ptr(out, "out")? = m.representation_dim();
        Ok(())
    })
}

/// Width `H` of the group representation.
#[no_mangle]
pub unsafe extern "C" fn sgmc_model_output_dim(model: *const SgmcModel, out: *mut usize) -> SgmcStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        *out_ptr(out, "out")? = m.config.projector.output_dim();
        Ok(())
    })
}

/// Encodes `n` windows of `[n_channels, n_times]` stored back to back in
/// `data` into `[n, D]` representations.
#[no_mangle]
pub unsafe extern "C" fn sgmc_model_encode(
    model: *const SgmcModel,
    data: *const f32,
    n: usize,
    n_channels: usize,
    n_times: usize,
    out: *mut f32,
    out_len: usize,
) -> SgmcStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        let per = dims_product(&[n_channels, n_times], "window")?;
        let x = input(data, dims_product(&[n, per], "data")?, "data")?;
        let samples = x
            .chunks(per.max(1))
            .take(n)
            .map(|w| EegSample::new(n_channels, n_times, w.to_vec(), 0, SubjectTag::Single(0)))
            .collect::<Result<Vec<_>, _>>()?;
        let reps = m.encode_samples(&samples)?;
        output(out, out_len, reps.len(), "out")?.copy_from_slice(reps.data());
        Ok(())
    })
}

/// Projects `q` member representations `[q, D]` to one group vector `[H]`.
#[no_mangle]
pub unsafe extern "C" fn sgmc_model_project_group(
    model: *const SgmcModel,
    reps: *const f32,
    q: usize,
    out: *mut f32,
    out_len: usize,
) -> SgmcStatus {
    guard(|| {
        let m = &borrow(model, "model")?.inner;
        let d = m.representation_dim();
        let x = input(reps, dims_product(&[q, d], "reps")?, "reps")?;
        let z = m.project_group(&Tensor::new(vec![q, d], x.to_vec())?)?;
        output(out, out_len, z.len(), "out")?.copy_from_slice(z.data());
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sgmc_model_free(model: *mut SgmcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Group NT-Xent loss for `[p, h]` representations of the A and B sides.
#[no_mangle]
pub unsafe extern "C" fn sgmc_group_ntxent_loss(
    za: *const f64,
    zb: *const f64,
    p: usize,
    h: usize,
    temperature: f64,
    out: *mut f64,
) -> SgmcStatus {
    guard(|| {
        let len = dims_product(&[p, h], "representations")?;
        let a = Tensor::new(vec![p, h], input(za, len, "za")?.to_vec())?;
        let b = Tensor::new(vec![p, h], input(zb, len, "zb")?.to_vec())?;
        let slot = out_ptr(out, "out")?;
        *slot = group_ntxent_loss(&a, &b, &LossConfig { temperature })?;
        Ok(())
    })
}

/// Swaps the first `split` time points of two `[n_channels, n_times]`
/// windows. `out_a` receives `b[..split]` then `a[split..]` per channel and
/// `out_b` the complement.
#[no_mangle]
pub unsafe extern "C" fn sgmc_crossover(
    a: *const f32,
    b: *const f32,
    n_channels: usize,
    n_times: usize,
    split: usize,
    out_a: *mut f32,
    out_b: *mut f32,
) -> SgmcStatus {
    guard(|| {
        let len = dims_product(&[n_channels, n_times], "window")?;
        let sa = EegSample::new(n_channels, n_times, input(a, len, "a")?.to_vec(), 0, SubjectTag::Single(0))?;
        let sb = EegSample::new(n_channels, n_times, input(b, len, "b")?.to_vec(), 0, SubjectTag::Single(1))?;
        let (xa, xb) = crossover(&sa, &sb, split)?;
        output(out_a, len, len, "out_a")?.copy_from_slice(&xa.values);
        output(out_b, len, len, "out_b")?.copy_from_slice(&xb.values);
        Ok(())
    })
}
