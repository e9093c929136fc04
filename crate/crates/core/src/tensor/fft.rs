//! Iterative radix-2 complex FFT over split re/im buffers.
//!
//! Only power-of-two lengths are supported; spatial extents in this crate
//! are powers of two by construction and other sizes are rejected upstream.
//! Twiddle factors come from the deterministic trig kernels and are cached
//! per transform length.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::detmath;

pub struct Plan {
    n: usize,
    /// Bit-reversal permutation.
    perm: Vec<u32>,
    /// Twiddles for each butterfly stage: stage s holds 2^s factors.
    stages: Vec<Vec<(f64, f64)>>,
}

fn plan_cache() -> &'static Mutex<HashMap<usize, Arc<Plan>>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Plan>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub fn plan(n: usize) -> Arc<Plan> {
    assert!(n.is_power_of_two() && n > 0, "fft length {n} not a power of two");
    let mut cache = plan_cache().lock().unwrap();
    if let Some(p) = cache.get(&n) {
        return Arc::clone(p);
    }
    let bits = n.trailing_zeros();
    let mut perm = vec![0u32; n];
    for (i, p) in perm.iter_mut().enumerate() {
        *p = (i as u32).reverse_bits() >> (32 - bits.max(1));
    }
    if n == 1 {
        perm[0] = 0;
    }
    let mut stages = Vec::new();
    let mut half = 1;
    while half < n {
        let mut tw = Vec::with_capacity(half);
        for k in 0..half {
            let ang = -std::f64::consts::PI * (k as f64) / (half as f64);
            tw.push((detmath::cos(ang), detmath::sin(ang)));
        }
        stages.push(tw);
        half *= 2;
    }
    let p = Arc::new(Plan { n, perm, stages });
    cache.insert(n, Arc::clone(&p));
    p
}

/// In-place FFT of length plan.n. `inverse` conjugates the twiddles; no
/// scaling is applied in either direction.
pub fn fft_inplace(plan: &Plan, re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = plan.n;
    debug_assert_eq!(re.len(), n);
    debug_assert_eq!(im.len(), n);
    for i in 0..n {
        let j = plan.perm[i] as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let conj = if inverse { -1.0 } else { 1.0 };
    for tw in &plan.stages {
        let half = tw.len();
        let step = half * 2;
        let mut base = 0;
        while base < n {
            for (k, &(wr, wi0)) in tw.iter().enumerate() {
                let wi = conj * wi0;
                let i0 = base + k;
                let i1 = i0 + half;
                let tr = re[i1] * wr - im[i1] * wi;
                let ti = re[i1] * wi + im[i1] * wr;
                re[i1] = re[i0] - tr;
                im[i1] = im[i0] - ti;
                re[i0] += tr;
                im[i0] += ti;
            }
            base += step;
        }
    }
}

/// 2-D FFT of an h x w plane (row-major). No scaling.
pub fn fft2_inplace(h: usize, w: usize, re: &mut [f64], im: &mut [f64], inverse: bool) {
    debug_assert_eq!(re.len(), h * w);
    let row_plan = plan(w);
    for r in 0..h {
        fft_inplace(&row_plan, &mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let col_plan = plan(h);
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft_inplace(&col_plan, &mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}
