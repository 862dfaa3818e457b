//! Mask targets, signal-approximation losses and SI-SNR.

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::tensor::{ComplexTensor, Graph, Scalar, Var};

/// Floor for `|Y|²` and for the SI-SNR energy terms.
pub const EPS: f64 = 1e-8;

/// Complex ratio mask `M = M_r + jM_i`, one value per TF bin.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMask<T: Scalar> {
    pub planes: ComplexTensor<T>,
}

impl<T: Scalar> ComplexMask<T> {
    pub fn new(planes: ComplexTensor<T>) -> Self {
        Self { planes }
    }

    pub fn shape(&self) -> &[usize] {
        self.planes.shape()
    }

    pub fn magnitude(&self) -> ArrayD<T> {
        self.planes.magnitude()
    }

    /// In `(−π, π]`.
    pub fn phase(&self) -> ArrayD<T> {
        self.planes.phase()
    }

    /// Mask that leaves `Y` unchanged under `variant`. The polar variants
    /// saturate tanh: `tanh(20)` rounds to exactly 1 in both precisions.
    pub fn identity(variant: Variant, shape: &[usize]) -> Self {
        let ones = ArrayD::from_elem(IxDyn(shape), T::one());
        let zeros = ArrayD::zeros(IxDyn(shape));
        let planes = match variant {
            Variant::R => ComplexTensor::new(ones.clone(), ones),
            Variant::C => ComplexTensor::new(ones, zeros),
            Variant::E | Variant::CL => ComplexTensor::new(ones.mapv(|_| T::of(20.0)), zeros),
        };
        Self::new(planes.expect("same shape"))
    }
}

/// `CRM = S / Y` per bin, with `|Y|²` floored at [`EPS`].
pub fn crm<T: Scalar>(s: &ComplexTensor<T>, y: &ComplexTensor<T>) -> Result<ComplexMask<T>> {
    if s.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            lhs: s.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let floor = T::of(EPS);
    let mut re = ArrayD::zeros(s.re().raw_dim());
    let mut im = ArrayD::zeros(s.re().raw_dim());
    Zip::from(&mut re)
        .and(&mut im)
        .and(s.re())
        .and(s.im())
        .and(y.re())
        .and(y.im())
        .for_each(|mr, mi, &sr, &si, &yr, &yi| {
            let d = (yr * yr + yi * yi).max(floor);
            *mr = (yr * sr + yi * si) / d;
            *mi = (yr * si - yi * sr) / d;
        });
    Ok(ComplexMask::new(ComplexTensor::new(re, im)?))
}

/// Spectral magnitude mask `|S| / |Y|`, `|Y|` floored at `√EPS`.
pub fn smm<T: Scalar>(s_mag: &ArrayD<T>, y_mag: &ArrayD<T>) -> Result<ArrayD<T>> {
    if s_mag.shape() != y_mag.shape() {
        return Err(Error::ShapeMismatch {
            lhs: s_mag.shape().to_vec(),
            rhs: y_mag.shape().to_vec(),
        });
    }
    let floor = T::of(EPS.sqrt());
    Ok(Zip::from(s_mag).and(y_mag).map_collect(|&s, &y| s / y.max(floor)))
}

/// Complex signal approximation: mean over bins of `|M·Y − S|²`.
pub fn loss_csa<T: Scalar>(m: &ComplexMask<T>, y: &ComplexTensor<T>, s: &ComplexTensor<T>) -> Result<f64> {
    let est = m.planes.cmul(y)?;
    if est.shape() != s.shape() {
        return Err(Error::ShapeMismatch {
            lhs: est.shape().to_vec(),
            rhs: s.shape().to_vec(),
        });
    }
    let diff = est.csub(s)?;
    Ok(diff.energy() / diff.len().max(1) as f64)
}

/// Magnitude signal approximation: mean of `(|M|·|Y| − |S|)²`.
pub fn loss_msa<T: Scalar>(m_mag: &ArrayD<T>, y_mag: &ArrayD<T>, s_mag: &ArrayD<T>) -> Result<f64> {
    if m_mag.shape() != y_mag.shape() || y_mag.shape() != s_mag.shape() {
        return Err(Error::ShapeMismatch {
            lhs: m_mag.shape().to_vec(),
            rhs: s_mag.shape().to_vec(),
        });
    }
    let mut acc = 0.0;
    Zip::from(m_mag).and(y_mag).and(s_mag).for_each(|&m, &y, &s| {
        let d = (m * y - s).as_f64();
        acc += d * d;
    });
    Ok(acc / m_mag.len().max(1) as f64)
}

/// Per-row SI-SNR in dB of `est: [B, L]` against the constant `reference`.
///
/// With `ŝ` the estimate, `s_t = (⟨ŝ,s⟩/‖s‖²)·s` and `e = ŝ − s_t`, the
/// result is `10·log10((‖s_t‖² + δ) / (‖e‖² + δ))` where `δ = EPS·‖ŝ‖²`.
/// Tying `δ` to the estimate energy keeps the guard scale invariant and
/// caps the value near ±80 dB.
pub fn si_snr_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    est: Var,
    reference: &ArrayD<T>,
    zero_mean: bool,
) -> Result<Var> {
    let shape = g.shape(est).to_vec();
    if shape.len() != 2 || reference.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch {
            lhs: shape,
            rhs: reference.shape().to_vec(),
        });
    }
    let mut r = reference.clone();
    if zero_mean {
        for mut row in r.axis_iter_mut(Axis(0)) {
            let m = row.iter().map(|v| v.as_f64()).sum::<f64>() / row.len().max(1) as f64;
            row.mapv_inplace(|v| v - T::of(m));
        }
    }
    let energy = r.map_axis(Axis(1), |row| row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
    if energy.iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidArgument("SI-SNR reference has no energy".into()));
    }
    let est = if zero_mean {
        let m = g.mean_axes(est, &[1])?;
        let neg = g.neg(m);
        g.add(est, neg)?
    } else {
        est
    };
    let b = shape[0];
    let inv_energy = g.constant(energy.mapv(|e| T::of(1.0 / e)).into_shape_with_order(IxDyn(&[b, 1])).expect("[B, 1]"));
    let rv = g.constant(r);
    let prod = g.mul(est, rv)?;
    let dot = g.sum_axes(prod, &[1])?;
    let coef = g.mul(dot, inv_energy)?;
    let target = g.mul(coef, rv)?;
    let noise = g.sub(est, target)?;
    let sq = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
        let s = g.square(v);
        g.sum_axes(s, &[1])
    };
    let num = sq(g, target)?;
    let den = sq(g, noise)?;
    let total = sq(g, est)?;
    let delta = g.scale(total, EPS);
    let delta = g.offset(delta, f64::MIN_POSITIVE);
    let num = g.add(num, delta)?;
    let den = g.add(den, delta)?;
    let ratio = g.div(num, den)?;
    let ln = g.log(ratio);
    let db = g.scale(ln, 10.0 / std::f64::consts::LN_10);
    g.reshape(db, &[b])
}

/// Training objective: `−mean SI-SNR` over the batch.
pub fn loss_sisnr<T: Scalar>(g: &mut Graph<'_, T>, est: Var, reference: &ArrayD<T>, zero_mean: bool) -> Result<Var> {
    let db = si_snr_graph(g, est, reference, zero_mean)?;
    let m = g.mean(db);
    Ok(g.neg(m))
}

/// SI-SNR in dB with both signals mean-subtracted.
pub fn si_snr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    si_snr_with(est, reference, true)
}

/// SI-SNR in dB, evaluated in 64-bit through the same expression as
/// [`loss_sisnr`].
pub fn si_snr_with<T: Scalar>(est: &[T], reference: &[T], zero_mean: bool) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::ShapeMismatch {
            lhs: vec![est.len()],
            rhs: vec![reference.len()],
        });
    }
    let n = est.len();
    let to64 = |x: &[T]| ArrayD::from_shape_fn(IxDyn(&[1, n]), |i| x[i[1]].as_f64());
    let mut g = Graph::<f64>::new();
    let e = g.constant(to64(est));
    let db = si_snr_graph(&mut g, e, &to64(reference), zero_mean)?;
    Ok(g.value(db)[[0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> ComplexTensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = || ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0));
        ComplexTensor::new(f(), f()).unwrap()
    }

    #[test]
    fn crm_of_self_is_one_and_of_silence_is_zero() {
        let y = random(&[5, 7], 1);
        let m = crm(&y, &y).unwrap();
        assert!(m.planes.re().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(m.planes.im().iter().all(|&v| v.abs() < 1e-12));
        let z = crm(&ComplexTensor::zeros(&[5, 7]), &y).unwrap();
        assert!(z.planes.re().iter().chain(z.planes.im().iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn crm_matches_complex_division() {
        let (s, y) = (random(&[9, 11], 2), random(&[9, 11], 3));
        let m = crm(&s, &y).unwrap();
        let mut checked = 0;
        for (idx, &yr) in y.re().indexed_iter() {
            let yi = y.im()[&idx];
            if yr.hypot(yi) <= 1e-3 {
                continue;
            }
            let (sr, si) = (s.re()[&idx], s.im()[&idx]);
            // (sr + j si)(yr − j yi) / |y|²
            let d = yr * yr + yi * yi;
            let (qr, qi) = ((sr * yr + si * yi) / d, (si * yr - sr * yi) / d);
            assert!((m.planes.re()[&idx] - qr).abs() <= 1e-10);
            assert!((m.planes.im()[&idx] - qi).abs() <= 1e-10);
            checked += 1;
        }
        assert!(checked > 90);
    }

    #[test]
    fn smm_cases() {
        let y = random(&[4, 6], 4).magnitude();
        let s = random(&[4, 6], 5).magnitude();
        assert!(smm(&y, &y).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(smm(&ArrayD::zeros(y.raw_dim()), &y).unwrap().iter().all(|&v| v == 0.0));
        let m = smm(&s, &y).unwrap();
        for ((&a, &b), &q) in s.iter().zip(y.iter()).zip(m.iter()) {
            assert!((a / b - q).abs() <= 1e-12 * (a / b).abs().max(1.0));
        }
    }

    #[test]
    fn signal_approximation_losses() {
        let (s, y) = (random(&[6, 8], 6), random(&[6, 8], 7));
        let m = crm(&s, &y).unwrap();
        assert!(loss_csa(&m, &y, &s).unwrap() < 1e-20);
        let zero = ComplexMask::new(ComplexTensor::zeros(&[6, 8]));
        assert_eq!(loss_csa(&zero, &y, &ComplexTensor::zeros(&[6, 8])).unwrap(), 0.0);

        let m = ComplexMask::new(random(&[6, 8], 8));
        let mut acc = 0.0;
        for (idx, &mr) in m.planes.re().indexed_iter() {
            let mi = m.planes.im()[&idx];
            let (yr, yi) = (y.re()[&idx], y.im()[&idx]);
            let (er, ei) = (mr * yr - mi * yi - s.re()[&idx], mr * yi + mi * yr - s.im()[&idx]);
            acc += er * er + ei * ei;
        }
        assert!((loss_csa(&m, &y, &s).unwrap() - acc / 48.0).abs() <= 1e-10);

        let (mm, ym, sm) = (m.magnitude(), y.magnitude(), s.magnitude());
        let mut acc = 0.0;
        for i in 0..48 {
            let d = mm.as_slice().unwrap()[i] * ym.as_slice().unwrap()[i] - sm.as_slice().unwrap()[i];
            acc += d * d;
        }
        assert!((loss_msa(&mm, &ym, &sm).unwrap() - acc / 48.0).abs() <= 1e-10);
    }

    #[test]
    fn si_snr_hand_case() {
        let db = si_snr_with(&[1.0f64, 1.0], &[1.0, 0.0], false).unwrap();
        assert!(db.abs() < 1e-12, "{db}");
    }

    #[test]
    fn si_snr_orthogonal_and_perfect_are_capped() {
        let s: Vec<f64> = (0..400).map(|i| (i as f64 * 0.1).sin()).collect();
        let o: Vec<f64> = (0..400).map(|i| (i as f64 * 0.1).cos()).collect();
        // Remove the residual projection so the pair is exactly orthogonal.
        let dot: f64 = s.iter().zip(&o).map(|(a, b)| a * b).sum::<f64>() / s.iter().map(|a| a * a).sum::<f64>();
        let o: Vec<f64> = o.iter().zip(&s).map(|(b, a)| b - dot * a).collect();
        assert!(si_snr_with(&o, &s, false).unwrap() <= -40.0);
        let perfect = si_snr(&s, &s).unwrap();
        assert!(perfect.is_finite() && (perfect - 80.0).abs() < 0.1, "{perfect}");
    }

    #[test]
    fn silent_reference_is_an_error() {
        assert!(si_snr(&[1.0f64, 2.0], &[0.0, 0.0]).is_err());
        assert!(si_snr(&[1.0f64, 2.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn negative_loss_equals_si_snr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e: Vec<f64> = s.iter().map(|v| v + 0.3 * rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let ev = g.constant(Array2::from_shape_vec((1, 256), e.clone()).unwrap().into_dyn());
        let loss = loss_sisnr(&mut g, ev, &Array2::from_shape_vec((1, 256), s.clone()).unwrap().into_dyn(), true).unwrap();
        assert_eq!(-g.value(loss)[[]], si_snr(&e, &s).unwrap());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::check_inputs;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = ArrayD::from_shape_simple_fn(IxDyn(&[2, 32]), || rng.gen_range(-1.0..1.0));
        let e = s.mapv(|v| v + 0.5 * rng.gen_range(-1.0..1.0));
        let report = check_inputs(&[e], 1e-5, |g, v| loss_sisnr(g, v[0], &s, true)).unwrap();
        assert!(report.max_rel_err <= 1e-4, "{report}");
    }

    #[test]
    fn descent_on_a_free_waveform_approaches_the_reference() {
        let s: Vec<f64> = (0..128).map(|i| (i as f64 * 0.2).sin() + 0.3 * (i as f64 * 0.05).cos()).collect();
        let sref = Array2::from_shape_vec((1, 128), s.clone()).unwrap().into_dyn();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = ArrayD::from_shape_simple_fn(IxDyn(&[1, 128]), || rng.gen_range(-1.0..1.0));
        let start = si_snr(x.as_slice().unwrap(), &s).unwrap();
        for k in 0..100 {
            let mut g = Graph::<f64>::new();
            let v = g.leaf(x.clone());
            let loss = loss_sisnr(&mut g, v, &sref, true).unwrap();
            let grads = g.backward(loss).unwrap();
            // Normalized steps with a decaying length: the loss is scale
            // invariant, so only the direction of x matters.
            let d = grads.wrt(v).unwrap();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nd = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            let step = 0.2 * 0.95f64.powi(k) * nx / nd;
            x.zip_mut_with(d, |a, &b| *a -= step * b);
        }
        let end = si_snr(x.as_slice().unwrap(), &s).unwrap();
        assert!(end > start + 20.0 && end > 20.0, "{start} -> {end}");
    }

    #[test]
    fn identity_masks_are_passthrough_for_each_variant() {
        let y = random(&[5, 3], 12);
        for v in Variant::ALL {
            let m = ComplexMask::<f64>::identity(v, &[5, 3]);
            let out = crate::model::apply_mask(&y, &m, v, crate::model::MaskActivation::Tanh).unwrap();
            for (a, b) in out.re().iter().chain(out.im().iter()).zip(y.re().iter().chain(y.im().iter())) {
                assert!((a - b).abs() <= 1e-12, "{v}: {a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn si_snr_is_scale_invariant(seed in 0u64..1000, alpha in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = s.iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            let (a, b) = (si_snr(&e, &s).unwrap(), si_snr(&scaled, &s).unwrap());
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
            // Powers of two scale every intermediate exactly.
            let pow2: Vec<f64> = e.iter().map(|v| 8.0 * v).collect();
            prop_assert_eq!(si_snr(&pow2, &s).unwrap(), a);
        }

        #[test]
        fn projection_target_is_parallel_to_reference(seed in 0u64..1000, k in 0.1f64..10.0) {
            // Scaling the reference moves only the projection coefficient.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e: Vec<f64> = (0..100).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ks: Vec<f64> = s.iter().map(|v| k * v).collect();
            let (a, b) = (si_snr(&e, &s).unwrap(), si_snr(&e, &ks).unwrap());
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }
}
