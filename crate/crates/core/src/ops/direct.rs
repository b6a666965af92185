//! Stride-1 "same" convolutions in `f32` on AVX-512, without im2col.
//!
//! Each channel plane is copied into a zero-bordered grid of width
//! `w + f - 1`. A filter tap is then a fixed offset into that grid, so the
//! forward pass and the input gradient read the grid directly and the filter
//! gradient becomes a set of dot products between grid rows. Output positions
//! are computed on the grid too; the `f - 1` extra columns per row are junk
//! and dropped when copying out.

use alloc::vec;
use alloc::vec::Vec;
use core::any::{Any, TypeId};
use core::arch::x86_64::*;

use super::conv::ConvParams;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Output rows (filters) per register tile.
const MR: usize = 8;
/// Grid positions per register tile, three 16-lane vectors.
const NR: usize = 48;
/// Filter-gradient tile over rows: filters by taps.
const OB: usize = 4;
const TB: usize = 6;
/// Filter-gradient tile over channels-last input: filters by channels.
const GR: usize = 12;
const GC: usize = 32;
/// Grid positions per filter-gradient pass, sized to keep panels in L1.
const QC: usize = 1024;

pub(crate) fn supported<T: Scalar>(params: &ConvParams<T>) -> bool {
    let f = params.kernel();
    TypeId::of::<T>() == TypeId::of::<f32>()
        && params.stride() == 1
        && 2 * params.padding() + 1 == f
        && std::arch::is_x86_feature_detected!("avx512f")
}

fn as_f32<T: Scalar>(t: &Tensor<T>) -> &Tensor<f32> {
    (t as &dyn Any).downcast_ref().expect("f32 tensor")
}

fn params_f32<T: Scalar>(p: &ConvParams<T>) -> &ConvParams<f32> {
    (p as &dyn Any).downcast_ref().expect("f32 parameters")
}

fn into_t<T: Scalar>(t: Tensor<f32>) -> Tensor<T> {
    let mut slot: Option<Tensor<T>> = None;
    *(&mut slot as &mut dyn Any)
        .downcast_mut::<Option<Tensor<f32>>>()
        .expect("f32 tensor") = Some(t);
    slot.expect("filled above")
}

#[derive(Clone, Copy)]
struct Grid {
    h: usize,
    w: usize,
    f: usize,
    /// Grid row width.
    gw: usize,
    /// Elements per bordered plane.
    plane: usize,
    /// Grid positions that carry outputs, `h * gw`.
    q: usize,
    /// `q` rounded up to whole register tiles.
    qr: usize,
}

impl Grid {
    fn new(h: usize, w: usize, f: usize) -> Self {
        let gw = w + f - 1;
        let q = h * gw;
        Grid {
            h,
            w,
            f,
            gw,
            plane: (h + f - 1) * gw,
            q,
            qr: q.div_ceil(NR) * NR,
        }
    }

    /// Offsets of every tap `(ky, kx)` in row-major order.
    fn shifts(&self) -> Vec<usize> {
        (0..self.f * self.f)
            .map(|t| (t / self.f) * self.gw + t % self.f)
            .collect()
    }

    /// Buffer length for `c` bordered planes plus slack for the rounded-up
    /// tail reads.
    fn padded_len(&self, c: usize) -> usize {
        c * self.plane + (self.qr - self.q) + self.f * self.gw + NR
    }

    /// Copies `c` planes of `h x w` into bordered grids.
    fn pad(&self, src: &[f32], c: usize, dst: &mut Vec<f32>) {
        let p = self.f / 2;
        dst.clear();
        dst.resize(self.padded_len(c), 0.0);
        for ci in 0..c {
            for y in 0..self.h {
                let from = &src[(ci * self.h + y) * self.w..][..self.w];
                let at = ci * self.plane + (y + p) * self.gw + p;
                dst[at..at + self.w].copy_from_slice(from);
            }
        }
    }

    /// Lays `c` planes of `h x w` on grid rows `h x gw`, junk columns zero,
    /// padded to a multiple of 16 per row.
    fn spread(&self, src: &[f32], c: usize, stride: usize, dst: &mut Vec<f32>) {
        dst.clear();
        dst.resize(c * stride, 0.0);
        for ci in 0..c {
            for y in 0..self.h {
                let from = &src[(ci * self.h + y) * self.w..][..self.w];
                let at = ci * stride + y * self.gw;
                dst[at..at + self.w].copy_from_slice(from);
            }
        }
    }

    /// Drops junk columns from `c` grid planes of length `qr`.
    fn gather(&self, grid: &[f32], c: usize, mut emit: impl FnMut(usize, &[f32], usize)) {
        for ci in 0..c {
            for y in 0..self.h {
                emit(ci, &grid[ci * self.qr + y * self.gw..][..self.w], y);
            }
        }
    }
}

/// Packs filters into `MR`-row panels ordered `[panel][tap][channel][row]`.
/// `weight(o, c, tap)` supplies each coefficient.
fn pack_filters(n_out: usize, c: usize, taps: usize, weight: impl Fn(usize, usize, usize) -> f32) -> Vec<f32> {
    let panels = n_out.div_ceil(MR);
    let mut packed = vec![0.0f32; panels * taps * c * MR];
    for panel in 0..panels {
        for t in 0..taps {
            for ci in 0..c {
                let base = ((panel * taps + t) * c + ci) * MR;
                for i in 0..MR.min(n_out - panel * MR) {
                    packed[base + i] = weight(panel * MR + i, ci, t);
                }
            }
        }
    }
    packed
}

/// `out[o][q] = sum over taps and channels of filter * grid`, for all `o` and
/// `q < qr`. `out` holds `n_out` planes of `g.qr`.
fn correlate(g: &Grid, padded: &[f32], c: usize, packed: &[f32], n_out: usize, out: &mut [f32]) {
    let shifts = g.shifts();
    let taps = shifts.len();
    assert!(padded.len() >= g.padded_len(c));
    assert!(packed.len() >= n_out.div_ceil(MR) * taps * c * MR);
    assert!(out.len() >= n_out * g.qr);
    for q0 in (0..g.qr).step_by(NR) {
        for panel in 0..n_out.div_ceil(MR) {
            let rows = MR.min(n_out - panel * MR);
            // SAFETY: avx512f was detected in `supported`; the asserts above
            // bound every read of `padded` and `packed` and every write to
            // `out` made by the tile.
            unsafe {
                tile(
                    packed.as_ptr().add(panel * taps * c * MR),
                    &shifts,
                    c,
                    g.plane,
                    padded.as_ptr().add(q0),
                    out.as_mut_ptr().add(panel * MR * g.qr + q0),
                    g.qr,
                    rows,
                );
            }
        }
    }
}

#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn tile(
    a: *const f32,
    shifts: &[usize],
    c: usize,
    plane: usize,
    x: *const f32,
    out: *mut f32,
    out_stride: usize,
    rows: usize,
) {
    let mut acc = [[_mm512_setzero_ps(); 3]; MR];
    let mut ap = a;
    for &s in shifts {
        let mut bp = x.add(s);
        for _ in 0..c {
            let b0 = _mm512_loadu_ps(bp);
            let b1 = _mm512_loadu_ps(bp.add(16));
            let b2 = _mm512_loadu_ps(bp.add(32));
            for (i, row) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_ps(*ap.add(i));
                row[0] = _mm512_fmadd_ps(av, b0, row[0]);
                row[1] = _mm512_fmadd_ps(av, b1, row[1]);
                row[2] = _mm512_fmadd_ps(av, b2, row[2]);
            }
            ap = ap.add(MR);
            bp = bp.add(plane);
        }
    }
    for (i, row) in acc.iter().enumerate().take(rows) {
        let dst = out.add(i * out_stride);
        _mm512_storeu_ps(dst, row[0]);
        _mm512_storeu_ps(dst.add(16), row[1]);
        _mm512_storeu_ps(dst.add(32), row[2]);
    }
}

/// `dw[o][t] += sum_q gs[o][q] * x[t][q]` where row `t = (ci, tap)` of `x`
/// starts at `ci * plane + shift[tap]` in the bordered input.
fn filter_grad(g: &Grid, padded: &[f32], c: usize, gs: &[f32], gs_stride: usize, n_out: usize, dw: &mut [f32]) {
    let shifts = g.shifts();
    let taps = shifts.len();
    let k = c * taps;
    let starts: Vec<usize> = (0..k).map(|t| (t / taps) * g.plane + shifts[t % taps]).collect();
    assert!(gs_stride.is_multiple_of(16) && gs.len() >= n_out * gs_stride);
    assert!(starts.iter().all(|&s| s + gs_stride <= padded.len()));
    assert!(dw.len() >= n_out * k);
    let vectors = gs_stride / 16;
    for o0 in (0..n_out).step_by(OB) {
        let o_rows: [usize; OB] = core::array::from_fn(|i| (o0 + i).min(n_out - 1));
        for t0 in (0..k).step_by(TB) {
            let t_rows: [usize; TB] = core::array::from_fn(|j| (t0 + j).min(k - 1));
            let mut sums = [[0.0f32; TB]; OB];
            // SAFETY: avx512f was detected in `supported`; each row pointer
            // is followed by `vectors * 16 <= gs_stride` readable elements
            // per the asserts above.
            unsafe {
                let gp: [*const f32; OB] = core::array::from_fn(|i| gs.as_ptr().add(o_rows[i] * gs_stride));
                let xp: [*const f32; TB] = core::array::from_fn(|j| padded.as_ptr().add(starts[t_rows[j]]));
                dot_tile(&gp, &xp, vectors, &mut sums);
            }
            for (i, row) in sums.iter().enumerate() {
                if o0 + i >= n_out {
                    break;
                }
                for (j, &s) in row.iter().enumerate() {
                    if t0 + j < k {
                        dw[(o0 + i) * k + t0 + j] += s;
                    }
                }
            }
        }
    }
}

#[target_feature(enable = "avx512f")]
unsafe fn dot_tile(gp: &[*const f32; OB], xp: &[*const f32; TB], vectors: usize, sums: &mut [[f32; TB]; OB]) {
    let mut acc = [[_mm512_setzero_ps(); TB]; OB];
    for v in 0..vectors {
        let gv: [__m512; OB] = core::array::from_fn(|i| _mm512_loadu_ps(gp[i].add(v * 16)));
        for j in 0..TB {
            let xv = _mm512_loadu_ps(xp[j].add(v * 16));
            for i in 0..OB {
                acc[i][j] = _mm512_fmadd_ps(gv[i], xv, acc[i][j]);
            }
        }
    }
    for i in 0..OB {
        for j in 0..TB {
            sums[i][j] = _mm512_reduce_add_ps(acc[i][j]);
        }
    }
}

impl Grid {
    /// Bordered input in channels-last order, `cp` lanes per grid position,
    /// with `f` spare rows so shifted reads of all `q` positions stay inside.
    fn pad_channels_last(&self, src: &[f32], c: usize, cp: usize, dst: &mut Vec<f32>) {
        let p = self.f / 2;
        dst.clear();
        dst.resize((self.plane + self.f) * cp, 0.0);
        for ci in 0..c {
            for y in 0..self.h {
                let from = &src[(ci * self.h + y) * self.w..][..self.w];
                let at = (y + p) * self.gw + p;
                for (x, &v) in from.iter().enumerate() {
                    dst[(at + x) * cp + ci] = v;
                }
            }
        }
    }
}

/// Packs the grid-laid output gradient `gs` into `GR`-filter panels ordered
/// `[panel][q][row]`.
fn pack_grad_panels(gs: &[f32], gs_stride: usize, n_out: usize, q: usize, dst: &mut Vec<f32>) {
    let panels = n_out.div_ceil(GR);
    dst.clear();
    dst.resize(panels * q * GR, 0.0);
    for o in 0..n_out {
        let (panel, i) = (o / GR, o % GR);
        let base = panel * q * GR + i;
        for (j, &v) in gs[o * gs_stride..][..q].iter().enumerate() {
            dst[base + j * GR] = v;
        }
    }
}

/// `dw[o][ci][tap] += sum_q gs[o][q] * xh[q + shift[tap]][ci]` with the input
/// channels-last; `c` must be a multiple of `GC`.
fn filter_grad_channels_last(g: &Grid, xh: &[f32], c: usize, panels: &[f32], n_out: usize, dw: &mut [f32]) {
    let shifts = g.shifts();
    let taps = shifts.len();
    assert!(c.is_multiple_of(GC));
    assert!(xh.len() >= (g.plane + g.f) * c);
    assert!(panels.len() >= n_out.div_ceil(GR) * g.q * GR);
    assert!(dw.len() >= n_out * c * taps);
    let mut block = [[0.0f32; GC]; GR];
    for q0 in (0..g.q).step_by(QC) {
        let qc = QC.min(g.q - q0);
        for (t, &shift) in shifts.iter().enumerate() {
            for panel in 0..n_out.div_ceil(GR) {
                for c0 in (0..c).step_by(GC) {
                    // SAFETY: avx512f was detected in `supported`; rows
                    // `shift..shift + q` of `xh` hold `c` lanes each and the
                    // panel holds `q * GR` values, per the asserts above.
                    unsafe {
                        outer_tile(
                            panels.as_ptr().add((panel * g.q + q0) * GR),
                            xh.as_ptr().add((shift + q0) * c + c0),
                            c,
                            qc,
                            &mut block,
                        );
                    }
                    for (i, row) in block.iter().enumerate().take(n_out.saturating_sub(panel * GR)) {
                        let o = panel * GR + i;
                        for (j, &v) in row.iter().enumerate() {
                            dw[(o * c + c0 + j) * taps + t] += v;
                        }
                    }
                }
            }
        }
    }
}

#[target_feature(enable = "avx512f")]
unsafe fn outer_tile(a: *const f32, b: *const f32, b_stride: usize, k: usize, out: &mut [[f32; GC]; GR]) {
    let mut acc = [[_mm512_setzero_ps(); 2]; GR];
    for q in 0..k {
        let bp = b.add(q * b_stride);
        let b0 = _mm512_loadu_ps(bp);
        let b1 = _mm512_loadu_ps(bp.add(16));
        let ap = a.add(q * GR);
        for (i, row) in acc.iter_mut().enumerate() {
            let av = _mm512_set1_ps(*ap.add(i));
            row[0] = _mm512_fmadd_ps(av, b0, row[0]);
            row[1] = _mm512_fmadd_ps(av, b1, row[1]);
        }
    }
    for (row, dst) in acc.iter().zip(out.iter_mut()) {
        _mm512_storeu_ps(dst.as_mut_ptr(), row[0]);
        _mm512_storeu_ps(dst.as_mut_ptr().add(16), row[1]);
    }
}

/// Forward pass; caller checked [`supported`] and the output shape.
pub(crate) fn forward<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>, out_shape: Shape) -> Tensor<T> {
    let (input, params) = (as_f32(input), params_f32(params));
    let s = input.shape();
    let (f, n_out) = (params.kernel(), params.out_channels());
    let g = Grid::new(s.h, s.w, f);
    let taps = f * f;
    let w = params.weights().data();
    let packed = pack_filters(n_out, s.c, taps, |o, c, t| w[(o * s.c + c) * taps + t]);
    let mut out = Tensor::<f32>::zeros(out_shape);
    let mut padded = Vec::new();
    let mut grid = vec![0.0f32; n_out * g.qr];
    for item in 0..s.n {
        g.pad(input.item(item), s.c, &mut padded);
        correlate(&g, &padded, s.c, &packed, n_out, &mut grid);
        let dst = out.item_mut(item);
        g.gather(&grid, n_out, |o, row, y| {
            let b = params.bias()[o];
            for (d, &v) in dst[(o * s.h + y) * s.w..][..s.w].iter_mut().zip(row) {
                *d = v + b;
            }
        });
    }
    into_t(out)
}

/// Input, filter and bias gradients; caller checked [`supported`] and shapes.
pub(crate) fn backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    params: &ConvParams<T>,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Vec<T>) {
    let (grad_out, input, params) = (as_f32(grad_out), as_f32(input), params_f32(params));
    let s = input.shape();
    let (f, n_out) = (params.kernel(), params.out_channels());
    let g = Grid::new(s.h, s.w, f);
    let taps = f * f;
    let w = params.weights().data();
    // input gradient: correlate the bordered output gradient with filters
    // flipped in space and transposed in channels
    let flipped = pack_filters(s.c, n_out, taps, |c, o, t| w[(o * s.c + c) * taps + (taps - 1 - t)]);
    let spread_stride = g.q.div_ceil(16) * 16;
    let mut grad_w = Tensor::<f32>::zeros(params.weights().shape());
    let mut grad_b = vec![0.0f32; n_out];
    let mut grad_in = need_input.then(|| Tensor::<f32>::zeros(s));
    let (mut padded, mut spread, mut padded_g, mut panels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let channels_last = s.c % GC == 0;
    let mut grid = vec![0.0f32; s.c * g.qr];
    for item in 0..s.n {
        let go = grad_out.item(item);
        for (o, b) in grad_b.iter_mut().enumerate() {
            *b += go[o * s.h * s.w..][..s.h * s.w].iter().sum::<f32>();
        }
        g.spread(go, n_out, spread_stride, &mut spread);
        if channels_last {
            g.pad_channels_last(input.item(item), s.c, s.c, &mut padded);
            pack_grad_panels(&spread, spread_stride, n_out, g.q, &mut panels);
            filter_grad_channels_last(&g, &padded, s.c, &panels, n_out, grad_w.data_mut());
        } else {
            g.pad(input.item(item), s.c, &mut padded);
            filter_grad(&g, &padded, s.c, &spread, spread_stride, n_out, grad_w.data_mut());
        }
        if let Some(grad_in) = grad_in.as_mut() {
            g.pad(go, n_out, &mut padded_g);
            correlate(&g, &padded_g, n_out, &flipped, s.c, &mut grid);
            let dst = grad_in.item_mut(item);
            g.gather(&grid, s.c, |c, row, y| {
                dst[(c * s.h + y) * s.w..][..s.w].copy_from_slice(row);
            });
        }
    }
    let grad_b: Vec<T> = grad_b.iter().map(|&b| T::from_f64(b as f64)).collect();
    (grad_in.map(into_t), into_t(grad_w), grad_b)
}
