//! Sampler, consistency checker, probe and calibration end to end.

mod common;

use common::random_grid;
use patchmosaic::analysis::{memorization_distance, receptive_field_probe, verify_local_consistency, Heatmap};
use patchmosaic::calibration::{calibrate_scales, CalibrationOptions, ReferenceSet, ReferenceTrajectory};
use patchmosaic::io::tensor::{load_reference_trajectory, save_trajectory};
use patchmosaic::sampler::{ddim_step, initial_noise, sample, sample_batch, Integrator, SampleOptions};
use patchmosaic::schedule::forward_noise;
use patchmosaic::toy::{run_toy, ToyOptions};
use patchmosaic::{
    build_machine, DictionaryOptions, ImageGrid, MachineConfig, NoiseSchedule, PaddingMode, PatchDictionary, ScaleSchedule,
    ScoreMachine, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn opts<'a>(sched: &'a NoiseSchedule, scales: Option<&'a ScaleSchedule>, like: &ImageGrid) -> SampleOptions<'a> {
    SampleOptions {
        schedule: sched,
        scales,
        shape: like.shape(),
        label: None,
        integrator: Integrator::Ddim,
        record: false,
        config_digest: String::new(),
    }
}

#[test]
fn ddim_with_true_noise_retraces_the_forward_process() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let x0 = random_grid(&mut rng, 4, 4, 3);
    let eta = random_grid(&mut rng, 4, 4, 3);
    let sched = NoiseSchedule::cosine(50).unwrap();
    let mut state = forward_noise(&x0, 50, &eta, &sched).unwrap();
    for k in (1..=50).rev() {
        state = ddim_step(&state, k, k - 1, &eta, &sched).unwrap();
        let want = forward_noise(&x0, k - 1, &eta, &sched).unwrap();
        assert!(state.max_abs_diff(&want) <= 1e-6, "step {k}");
    }
    assert!(state.max_abs_diff(&x0) <= 1e-6);
}

/// Largest deviation between Euler and DDIM states along the whole path.
fn euler_gap(machine: &dyn ScoreMachine, like: &ImageGrid, steps: usize) -> f64 {
    let sched = NoiseSchedule::cosine(steps).unwrap();
    let mut o = opts(&sched, None, like);
    o.record = true;
    let ddim = sample(machine, 3, &o).unwrap().trajectory.unwrap();
    o.integrator = Integrator::Euler;
    let euler = sample(machine, 3, &o).unwrap().trajectory.unwrap();
    let mut gap = euler.final_state.max_abs_diff(&ddim.final_state);
    for (a, b) in ddim.steps.iter().zip(&euler.steps) {
        gap = gap.max(a.state.max_abs_diff(&b.state));
    }
    gap
}

#[test]
fn euler_converges_to_ddim_at_first_order() {
    let target = ImageGrid::new(2, 2, 1, vec![0.5, -0.25, 0.75, -1.0]).unwrap();
    let m = build_machine(&MachineConfig::new(Variant::Is, vec![target.clone()])).unwrap();
    let gaps: Vec<f64> = [50, 100, 200, 400].iter().map(|&n| euler_gap(m.as_ref(), &target, n)).collect();
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.6..2.5).contains(&ratio), "gaps {gaps:?}");
    }
}

#[test]
fn trajectories_are_resimulable() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let data: Vec<ImageGrid> = (0..3).map(|_| random_grid(&mut rng, 5, 5, 1)).collect();
    let m = build_machine(&MachineConfig::new(Variant::Els, data.clone()).with_scales([3, 5])).unwrap();
    let sched = NoiseSchedule::cosine(8).unwrap();
    let scales = ScaleSchedule::new(vec![3, 3, 3, 3, 5, 5, 5, 5]).unwrap();
    let mut o = opts(&sched, Some(&scales), &data[0]);
    o.record = true;
    let out = sample(m.as_ref(), 17, &o).unwrap();
    let t = out.trajectory.unwrap();
    assert_eq!(t.steps.len(), 8);
    assert_eq!(t.steps[0].state, initial_noise(17, data[0].shape()));
    for (i, s) in t.steps.iter().enumerate() {
        assert_eq!(s.t_index, 8 - i);
        let noise = m.predict_noise(&s.state, sched.alpha_bar(s.t_index), scales.at(s.t_index)).unwrap();
        assert_eq!(noise, s.noise);
        let next = ddim_step(&s.state, s.t_index, s.t_index - 1, &s.noise, &sched).unwrap();
        let recorded = t.steps.get(i + 1).map_or(&t.final_state, |n| &n.state);
        assert_eq!(next.data(), recorded.data());
    }
    assert_eq!(t.final_state, out.image);
}

#[test]
fn batches_are_identical_across_thread_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let data: Vec<ImageGrid> = (0..4).map(|_| random_grid(&mut rng, 8, 8, 1)).collect();
    let m = build_machine(&MachineConfig::new(Variant::Els, data.clone()).with_scales([3]).with_dedup(true)).unwrap();
    let sched = NoiseSchedule::cosine(10).unwrap();
    let scales = ScaleSchedule::constant(3, 10).unwrap();
    let o = opts(&sched, Some(&scales), &data[0]);
    let seeds: Vec<u64> = (0..6).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| sample_batch(m.as_ref(), &seeds, &o).unwrap())
    };
    let (a, b) = (run(1), run(4));
    for (x, y) in a.iter().zip(&b) {
        let bits = |g: &ImageGrid| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.image), bits(&y.image));
    }
}

#[test]
fn checker_matches_exhaustive_torus_enumeration() {
    let data = vec![ImageGrid::filled(3, 3, 1, -1.0), ImageGrid::filled(3, 3, 1, 1.0)];
    let dict = PatchDictionary::build(&data, DictionaryOptions::new(3, PaddingMode::Circular)).unwrap();
    let mut consistent = Vec::new();
    for bits in 0u32..512 {
        let v: Vec<f64> = (0..9).map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let img = ImageGrid::new(3, 3, 1, v.clone()).unwrap();
        // On a 3x3 torus every window holds all nine pixels, so the nearest
        // patch is the majority color and each pixel must equal it.
        let whites = v.iter().filter(|&&x| x > 0.0).count();
        let majority = if whites >= 5 { 1.0 } else { -1.0 };
        let oracle = v.iter().all(|&x| x == majority);
        let report = verify_local_consistency(&img, &dict, Variant::Els, 0.05).unwrap();
        assert_eq!(report.is_consistent(), oracle, "image {bits:09b}");
        if oracle {
            consistent.push(bits);
        }
    }
    assert_eq!(consistent, vec![0, 511]);
}

#[test]
fn checker_flags_exactly_a_flipped_pixel() {
    let data = vec![ImageGrid::filled(8, 8, 1, -1.0), ImageGrid::filled(8, 8, 1, 1.0)];
    let dict = PatchDictionary::build(&data, DictionaryOptions::new(3, PaddingMode::Circular)).unwrap();
    let mut img = ImageGrid::filled(8, 8, 1, -1.0);
    img.set(3, 5, 0, 1.0);
    let report = verify_local_consistency(&img, &dict, Variant::Els, 0.05).unwrap();
    assert_eq!(report.failing, vec![(3, 5)]);
}

#[test]
fn toy_samples_are_consistent_novel_mosaics() {
    let opts = ToyOptions { size: 16, steps: 200, samples: 8, ..ToyOptions::default() };
    let report = run_toy(&opts).unwrap();
    assert_eq!(report.samples.len(), 8);
    assert!(report.min_binary_fraction >= 0.99);
    assert!(report.min_pass_fraction >= 0.99);
    for (s, img) in report.samples.iter().zip(&report.images) {
        // A binary sample is at least (2 - tau) per minority pixel from the
        // nearer constant training image.
        let (d, _) = memorization_distance(img, &patchmosaic::toy::toy_training_set(16)).unwrap();
        assert_eq!(d, s.memorization_distance);
        assert!(d >= (2.0 - opts.tau) * (s.minority_pixels as f64).sqrt() - 1e-9);
    }
    let bels = run_toy(&ToyOptions { size: 16, steps: 100, samples: 2, pad: PaddingMode::Zero, ..ToyOptions::default() }).unwrap();
    assert_eq!(bels.variant, Variant::Bels);
    assert!(bels.min_binary_fraction >= 0.99);
}

fn probe_at(m: &dyn ScoreMachine, phi: &ImageGrid, eps: f64) -> Heatmap {
    receptive_field_probe(m, phi, 0.6, 3, (2, 3), eps).unwrap()
}

#[test]
fn probe_support_and_convergence() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let data: Vec<ImageGrid> = (0..3).map(|_| random_grid(&mut rng, 6, 6, 1)).collect();
    let phi = random_grid(&mut rng, 6, 6, 1);
    let els = build_machine(&MachineConfig::new(Variant::Els, data.clone()).with_scales([3])).unwrap();
    let heat = probe_at(els.as_ref(), &phi, 1e-4);
    for r in 0..6 {
        for c in 0..6 {
            let inside = (r as usize).abs_diff(2) <= 1 && (c as usize).abs_diff(3) <= 1;
            assert_eq!(heat.at(r, c) == 0.0, !inside, "({r},{c})");
        }
    }
    let is = build_machine(&MachineConfig::new(Variant::Is, data)).unwrap();
    let h: Vec<Heatmap> = [0.04, 0.02, 0.01].iter().map(|&e| probe_at(is.as_ref(), &phi, e)).collect();
    assert!(h[2].values.iter().all(|v| *v > 0.0));
    let diff = |a: &Heatmap, b: &Heatmap| a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let (d1, d2) = (diff(&h[0], &h[1]), diff(&h[1], &h[2]));
    assert!(d2 < d1 && (3.0..5.0).contains(&(d1 / d2)), "{d1} {d2}");
    assert!(receptive_field_probe(is.as_ref(), &phi, 0.6, 3, (2, 3), 0.0).is_err());
}

#[test]
fn calibration_recovers_generating_scales() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let data: Vec<ImageGrid> = (0..4).map(|_| random_grid(&mut rng, 8, 8, 1)).collect();
    let m = build_machine(&MachineConfig::new(Variant::Els, data.clone()).with_scales([3, 5, 7, 9]).with_dedup(true)).unwrap();
    let sched = NoiseSchedule::cosine(6).unwrap();
    let truth = ScaleSchedule::new(vec![3, 3, 5, 7, 9, 9]).unwrap();
    let mut o = opts(&sched, Some(&truth), &data[0]);
    o.record = true;
    let dir = tempfile::tempdir().unwrap();
    let mut refs = Vec::new();
    for seed in 0..5 {
        let t = sample(m.as_ref(), seed, &o).unwrap().trajectory.unwrap();
        let path = dir.path().join(format!("t{seed}.tns"));
        save_trajectory(&path, &t).unwrap();
        let loaded = load_reference_trajectory(&path).unwrap();
        assert_eq!(loaded.t_indices, ReferenceTrajectory::from_trajectory(&t).t_indices);
        refs.push(loaded);
    }
    let set = ReferenceSet { trajectories: refs, provenance: "self".into() };
    let report = calibrate_scales(&set, m.as_ref(), &[3, 5, 7, 9], &sched, CalibrationOptions::default()).unwrap();
    assert_eq!(report.schedule, truth);
    let single = calibrate_scales(&set, m.as_ref(), &[3], &sched, CalibrationOptions::default()).unwrap();
    assert_eq!(single.schedule.as_slice(), &[3; 6]);
    assert!(calibrate_scales(&ReferenceSet::default(), m.as_ref(), &[3], &sched, CalibrationOptions::default()).is_err());
}
