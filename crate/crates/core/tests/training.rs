use dualseg::nn::{batch_tensor, DualModel, init_dual, load_checkpoint, save_checkpoint, ArchKind, SubnetSpec, Which};
use dualseg::objectives::{lambda_c_schedule, threshold_schedule};
use dualseg::trainer::{fit, predict_volume, Dataset, PredictWith, RunLayout, Sampler, TrainConfig};
use dualseg::volume::{Shape3, SynthSpec, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.iterations = iterations;
    c.patch = Shape3::cube(8);
    for s in [&mut c.spec_a, &mut c.spec_b] {
        s.base_channels = 4;
        s.depth = 2;
    }
    c.eval.patch = c.patch;
    c.eval.stride = Shape3::cube(4);
    c
}

fn small_data(seed: u64) -> Dataset<f64> {
    let spec = SynthSpec {
        shape: Shape3::cube(10),
        radius: (2.0, 4.0),
        ..SynthSpec::desk()
    };
    Dataset::synthetic(&spec, 4, 4, 1, seed).unwrap()
}

fn noise(shape: Shape3, seed: u64) -> Volume<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Volume::new(shape, [1.0; 3], (0..shape.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn assert_same_weights(x: &DualModel<f64>, y: &DualModel<f64>) {
    assert_eq!(x.a.flat_params(), y.a.flat_params());
    assert_eq!(x.b.flat_params(), y.b.flat_params());
    assert_eq!(x.iteration, y.iteration);
}

#[test]
fn outputs_are_distributions_of_input_shape() {
    let c = small_cfg(1);
    let m = init_dual::<f64>(c.spec_a, c.spec_b, 3).unwrap();
    for shape in [Shape3::cube(8), Shape3::new(5, 7, 3), Shape3::new(1, 1, 1)] {
        for out in m.forward(&noise(shape, 1), Which::Both).unwrap() {
            assert_eq!(out.probs.shape(), shape);
            assert_eq!(out.probs.classes(), 2);
            assert_eq!(out.embeddings.shape(), shape);
            assert!(out.probs.max_row_sum_error() < 1e-12);
            assert!(out.probs.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn subnets_disagree_at_initialization() {
    let c = small_cfg(1);
    let m = init_dual::<f64>(c.spec_a, c.spec_b, 0).unwrap();
    let out = m.forward(&noise(Shape3::cube(8), 2), Which::Both).unwrap();
    let diff = out[0]
        .probs
        .data()
        .iter()
        .zip(out[1].probs.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / out[0].probs.data().len() as f64;
    assert!(diff > 1e-6, "mean |pA - pB| = {diff}");
}

#[test]
fn same_architecture_is_rejected() {
    let s = SubnetSpec::desk(ArchKind::Plain);
    assert!(init_dual::<f64>(s, s, 0).is_err());
}

#[test]
fn parameter_counts_are_pinned() {
    let mut a = SubnetSpec::desk(ArchKind::Plain);
    let mut b = SubnetSpec::desk(ArchKind::Residual);
    assert_eq!(init_dual::<f32>(a, b, 0).unwrap().count_parameters(), (55954, 92410));
    a.base_channels = 4;
    b.base_channels = 4;
    assert_eq!(init_dual::<f32>(a, b, 0).unwrap().count_parameters(), (14190, 23346));
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let c = small_cfg(3);
    let data = small_data(5);
    let model = fit(&c, &data, None).unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    assert_same_weights(&back, &model);
    let v = &data.test[0].image;
    let p0 = predict_volume(&model, v, c.eval.patch, c.eval.stride, PredictWith::Mean).unwrap();
    let p1 = predict_volume(&back, v, c.eval.patch, c.eval.stride, PredictWith::Mean).unwrap();
    assert_eq!(p0, p1);
}

#[test]
fn reports_follow_the_schedules() {
    let mut c = small_cfg(10);
    c.lr.step = 4;
    let data = small_data(6);
    let reports = fit(&c, &data, None).unwrap().reports;
    assert_eq!(reports.len(), 10);
    for (t, r) in reports.iter().enumerate() {
        assert_eq!(r.iteration, t);
        let w = &c.weights.lambda_c;
        assert_eq!(r.lambda_c, lambda_c_schedule(t, 10, w.w_c, w.a, w.sign).unwrap());
        assert_eq!(r.threshold, threshold_schedule(t, 10, c.threshold.t0, c.threshold.t1, 2).unwrap());
        assert_eq!(r.lr, c.lr.at(t));
        let sum = r.ls_a + r.ls_b + c.weights.lambda_u * r.lu + r.lambda_c * r.l_c;
        assert!((r.total - sum).abs() <= 1e-9 * sum.abs().max(1.0));
    }
    assert_eq!(reports[4].lr, reports[0].lr / 10.0);
}

#[test]
fn sampling_is_seed_determined() {
    let data = small_data(7);
    let draw = |seed| {
        let mut s = Sampler::new(data.labeled.len(), data.unlabeled.len(), seed);
        (0..6)
            .map(|_| {
                let (li, lp) = s.labeled_batch(&data, 2, Shape3::cube(6)).unwrap();
                let (ui, up) = s.unlabeled_batch(&data, 2, Shape3::cube(6)).unwrap();
                (li, ui, lp, up)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(1), draw(1));
    assert_ne!(draw(1), draw(2));
}

#[test]
fn labeled_stream_visits_every_case_per_epoch() {
    let data = small_data(8);
    let mut s = Sampler::new(4, 4, 0);
    let mut ids: Vec<usize> = (0..2).flat_map(|_| s.labeled_batch(&data, 2, Shape3::cube(4)).unwrap().0).collect();
    ids.sort_unstable();
    assert_eq!(ids, vec![0, 1, 2, 3]);
}

#[test]
fn fit_writes_log_and_final_checkpoint() {
    let mut c = small_cfg(10);
    c.checkpoint_every = 4;
    let dir = tempfile::tempdir().unwrap();
    let res = fit(&c, &small_data(9), Some(dir.path())).unwrap();
    assert_eq!(res.reports.len(), 10);
    let layout = RunLayout::new(dir.path());
    let log = std::fs::read_to_string(layout.log()).unwrap();
    assert_eq!(log.lines().count(), 10);
    for i in [4, 8, 10] {
        assert!(layout.checkpoint(i).exists(), "missing checkpoint {i}");
    }
    assert_same_weights(&load_checkpoint::<f64>(layout.final_checkpoint()).unwrap(), &res.model);
}

#[test]
fn whole_volume_window_matches_direct_forward() {
    let c = small_cfg(2);
    let model = fit(&c, &small_data(10), None).unwrap().model;
    let v = noise(Shape3::cube(8), 4);
    let direct = model.forward(&v, Which::Both).unwrap();
    let x = batch_tensor(&[&v]).unwrap();
    assert_eq!(model.a.forward(&x).unwrap().item(0).probs, direct[0].probs);
    for (which, want) in [(PredictWith::A, &direct[0].probs), (PredictWith::B, &direct[1].probs)] {
        let (_, p) = predict_volume(&model, &v, v.shape(), Shape3::cube(8), which).unwrap();
        assert_eq!(&p, want);
    }
    let (labels, p) = predict_volume(&model, &v, v.shape(), Shape3::cube(8), PredictWith::Mean).unwrap();
    for (i, q) in p.data().iter().enumerate() {
        let m = 0.5 * (direct[0].probs.data()[i] + direct[1].probs.data()[i]);
        assert!((q - m).abs() < 1e-15);
    }
    assert_eq!(labels, p.argmax());
}
