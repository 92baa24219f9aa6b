//! Property tests for invariants that hold for any admissible input.

use nalgebra::Matrix3;
use proptest::prelude::*;
use spinnoise::config::RunConfig;
use spinnoise::dephasing::{dephasing_function, filter_function, OuBath, PulseSequence, DEFAULT_CUTOFF};
use spinnoise::geometry::{reciprocal_lattice, shape_factor_at, UnitCellGeometry};
use spinnoise::magnetics::{lab_susceptibility, LlgParams};
use spinnoise::spectrum::{NoiseSpectrum, Provenance, SpectrumMetadata};
use std::f64::consts::PI;

fn sequence(pulses: usize, duration: f64) -> PulseSequence {
    if pulses == 1 {
        PulseSequence::hahn(duration).unwrap()
    } else {
        PulseSequence::cpmg(pulses, duration).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_is_non_negative(pulses in 1usize..=64, t_us in 0.1f64..100.0, f_mhz in 1e-3f64..1e3) {
        let seq = sequence(pulses, t_us * 1e-6);
        let f = filter_function(&seq, 2.0 * PI * f_mhz * 1e6);
        prop_assert!(f.is_finite() && f >= 0.0);
    }

    #[test]
    fn susceptibility_is_passive(damping in 1e-3f64..0.2, log_omega in 4.0f64..11.0, anis_gauss in 1.0f64..50.0) {
        let mut llg = LlgParams::cofeb();
        llg.gilbert_damping = damping;
        llg.inplane_anisotropy_field = anis_gauss * 1e-4;
        let chi = lab_susceptibility(&llg, 10f64.powf(log_omega)).unwrap();
        let scale = chi.value.norm();
        let eig = chi.dissipative().symmetric_eigenvalues();
        let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(*v));
        prop_assert!(min >= -1e-12 * scale, "min eigenvalue {min:e}, |χ| {scale:e}");
    }

    #[test]
    fn reciprocal_lattice_is_closed_under_negation(order in 0usize..8, px in 100e-9f64..400e-9, py in 100e-9f64..400e-9) {
        let mut geom = UnitCellGeometry::metasurface_1();
        geom.periods = [px, py];
        let basis = reciprocal_lattice(&geom, order);
        prop_assert_eq!(basis.len(), (2 * order + 1).pow(2));
        prop_assert_eq!(basis.points[0].g, [0.0, 0.0]);
        for p in &basis.points {
            prop_assert!(basis.index_of(-p.m, -p.n).is_some());
        }
    }

    #[test]
    fn shape_factor_of_real_occupancy_is_hermitian(m in -12i32..=12, n in -12i32..=12, angle in 0.0f64..PI) {
        let geom = UnitCellGeometry::metasurface_2(angle);
        let b = [2.0 * PI / geom.periods[0], 2.0 * PI / geom.periods[1]];
        let g = [m as f64 * b[0], n as f64 * b[1]];
        let f = shape_factor_at(&geom, g);
        let f_neg = shape_factor_at(&geom, [-g[0], -g[1]]);
        prop_assert!((f - f_neg.conj()).norm() <= 1e-14);
        prop_assert!(f.norm() <= geom.filling_factor() + 1e-14);
    }

    #[test]
    fn dephasing_is_linear_in_the_spectrum(delta_mhz in 0.5f64..10.0, tau_ns in 5.0f64..200.0, t_us in 0.5f64..20.0, pulses in 1usize..=16) {
        let bath = OuBath::new(delta_mhz * 1e6, tau_ns * 1e-9).unwrap();
        let seq = sequence(pulses, t_us * 1e-6);
        let one = dephasing_function(&|w| bath.spectrum(w), &seq, DEFAULT_CUTOFF).unwrap().value;
        let two = dephasing_function(&|w| 2.0 * bath.spectrum(w), &seq, DEFAULT_CUTOFF).unwrap().value;
        prop_assert!(one > 0.0);
        prop_assert!((two / one - 2.0).abs() <= 1e-9);
    }

    #[test]
    fn hahn_dephasing_grows_with_time(delta_mhz in 0.5f64..10.0, tau_ns in 5.0f64..200.0, t_us in 0.2f64..20.0) {
        let bath = OuBath::new(delta_mhz * 1e6, tau_ns * 1e-9).unwrap();
        let j = |w: f64| bath.spectrum(w);
        let a = dephasing_function(&j, &PulseSequence::hahn(t_us * 1e-6).unwrap(), DEFAULT_CUTOFF).unwrap().value;
        let b = dephasing_function(&j, &PulseSequence::hahn(1.5 * t_us * 1e-6).unwrap(), DEFAULT_CUTOFF).unwrap().value;
        prop_assert!(b > a);
    }

    #[test]
    fn interpolation_stays_between_neighbours(values in prop::collection::vec(1e-3f64..1e6, 2..12), x in 0.0f64..1.0) {
        let n = values.len();
        let omega: Vec<f64> = (0..n).map(|k| 1e6 * 2f64.powi(k as i32)).collect();
        let s = NoiseSpectrum::new(omega.clone(), values.clone(), vec![0.0; n], Provenance::Measured, SpectrumMetadata::default()).unwrap();
        let w = omega[0] * (omega[n - 1] / omega[0]).powf(x);
        let k = omega.partition_point(|&o| o <= w).saturating_sub(1).min(n - 2);
        let (lo, hi) = (values[k].min(values[k + 1]), values[k].max(values[k + 1]));
        let v = s.value_at(w);
        prop_assert!(v >= lo * (1.0 - 1e-12) && v <= hi * (1.0 + 1e-12), "{v} outside [{lo}, {hi}]");
        prop_assert_eq!(s.value_at(omega[0] * 0.5), values[0]);
        prop_assert_eq!(s.value_at(omega[n - 1] * 2.0), values[n - 1]);
    }

    #[test]
    fn unit_suffixes_agree(height_nm in 5.0f64..500.0, f_mhz in 0.01f64..100.0) {
        let a = RunConfig::from_toml(&format!("[sweep]\nheights_nm = [{height_nm:?}]\nfrequencies_mhz = [{f_mhz:?}]\n"), None).unwrap();
        let b = RunConfig::from_toml(
            &format!("[sweep]\nheights_um = [{:?}]\nfrequencies_khz = [{:?}]\n", height_nm * 1e-3, f_mhz * 1e3),
            None,
        )
        .unwrap();
        prop_assert!((a.probe.height / b.probe.height - 1.0).abs() <= 1e-12);
        prop_assert!((a.sweep.omegas[0] / b.sweep.omegas[0] - 1.0).abs() <= 1e-12);
        prop_assert!((a.sweep.omegas[0] - 2.0 * PI * f_mhz * 1e6).abs() <= 1e-9 * a.sweep.omegas[0]);
    }
}

#[test]
fn bare_numbers_are_rejected_for_every_dimensional_key() {
    let err = RunConfig::from_toml("[sweep]\nheights = [45]\n[probe]\ntemperature = 4\n", None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let text = err.to_string();
    assert!(text.contains("heights") && text.contains("temperature"), "{text}");
}

#[test]
fn dissipative_part_is_hermitian() {
    // The eigenvalue check above relies on a Hermitian input.
    let chi = lab_susceptibility(&LlgParams::cofeb(), 2.0 * PI * 1e6).unwrap();
    let d = chi.dissipative();
    let herm: Matrix3<f64> = (d - d.adjoint()).map(|z| z.norm());
    assert!(herm.max() <= 1e-15 * d.norm().max(1e-300));
}
