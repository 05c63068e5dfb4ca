use super::*;
use crate::autodiff::Reduction;
use crate::data::{generate_corpus, CorpusSpec};
use crate::model::{build_efficientnet, loss_and_grad, Classifier, ForwardCtx, ImageModel, ImageModelSpec};
use crate::optim::{Optimizer, OptimizerConfig, SgdConfig};
use crate::tensor::Tensor;

fn micro() -> (ImageModel<f64>, TrainData<Tensor<f64>>) {
    let spec = CorpusSpec { image_size: 16, ..CorpusSpec::desk(4, 12) };
    let corpus = generate_corpus(&spec, 2).unwrap();
    let inputs = corpus.docs.iter().map(|d| d.image.cast::<f64>()).collect();
    let data = TrainData::new(inputs, corpus.labels()).unwrap();
    let mut mspec = ImageModelSpec::micro(4, 16);
    mspec.dropout = 0.2;
    (build_efficientnet(&mspec, 1).unwrap(), data)
}

fn cfg(steps_epochs: usize) -> TrainConfig {
    TrainConfig::new(steps_epochs, OptimizerConfig::Sgd(SgdConfig::default()), 0.05)
}

#[test]
fn k_workers_match_single_worker() {
    let (model, data) = micro();
    // 48 samples, global batch 8 -> 6 steps per epoch; two epochs > 10 steps
    let mut c = cfg(2);
    c.schedule = LrSchedule::Stlr { cut_frac: 0.25, ratio: 8.0 };
    let one = train_parallel(&model, &data, None, &ParallelConfig::new(1, 8, 3), &c, None).unwrap();
    for (k, n) in [(2, 4), (4, 2)] {
        let mut par = ParallelConfig::new(k, n, 3);
        par.verify_replicas = true;
        let out = train_parallel(&model, &data, None, &par, &c, None).unwrap();
        assert_eq!(out.steps, one.steps);
        let d = out.model.params().max_abs_diff(one.model.params()).unwrap();
        assert!(d <= 1e-6, "k={k}: {d}");
    }
}

#[test]
fn single_worker_is_plain_loop() {
    let (model, data) = micro();
    let c = cfg(1);
    let par = ParallelConfig::new(1, 8, 9);
    let out = train_parallel(&model, &data, None, &par, &c, None).unwrap();

    let mut m = model.clone();
    let mut opt = Optimizer::new(c.optimizer, m.params().count()).unwrap();
    let perm = crate::data::corpus::shuffled(data.len(), 9, &[0xE90C, 0]);
    for (step, batch) in perm.chunks_exact(8).enumerate() {
        let refs: Vec<_> = batch.iter().map(|&i| &data.inputs[i]).collect();
        let labels: Vec<_> = batch.iter().map(|&i| data.labels[i]).collect();
        let ids: Vec<_> = batch.iter().map(|&i| data.ids[i]).collect();
        let ctx = ForwardCtx { train: true, seed: 9, step: step as u64, sample_ids: &ids };
        let (_, mut g) = loss_and_grad(&m, &refs, &labels, &ctx, Reduction::Sum).unwrap();
        g.iter_mut().for_each(|v| *v /= 8.0);
        opt.step(m.params_mut(), &g, &crate::optim::LrPlan::Uniform(0.05)).unwrap();
    }
    assert_eq!(out.model.params().flatten(), m.params().flatten());
}

#[test]
fn update_is_mean_of_per_sample_gradients() {
    let (mut model, data) = micro();
    model.spec.dropout = 0.0;
    let mut c = cfg(1);
    c.optimizer = OptimizerConfig::Sgd(SgdConfig { momentum: 0.0, weight_decay: 0.0 });
    c.base_lr = 1.0;
    let par = ParallelConfig::new(2, 4, 5);
    let small = TrainData::new(data.inputs[..8].to_vec(), data.labels[..8].to_vec()).unwrap();
    let out = train_parallel(&model, &small, None, &par, &c, None).unwrap();

    let mut mean = vec![0.0; model.params().count()];
    for i in 0..8 {
        let ctx = ForwardCtx { train: true, seed: 0, step: 0, sample_ids: &[i as u64] };
        let (_, g) = loss_and_grad(&model, &[&small.inputs[i]], &[small.labels[i]], &ctx, Reduction::Mean).unwrap();
        for (m, v) in mean.iter_mut().zip(g) {
            *m += v / 8.0;
        }
    }
    let before = model.params().flatten();
    let after = out.model.params().flatten();
    let dev = before
        .iter()
        .zip(&after)
        .zip(&mean)
        .map(|((b, a), g)| ((b - a) - g).abs())
        .fold(0.0, f64::max);
    assert!(dev < 1e-10, "{dev}");
}

#[test]
fn linear_scaling_wiring() {
    let (model, _) = micro();
    let mut c = cfg(1);
    c.base_lr = 0.2;
    c.linear_scaling = true;
    let plan = c.peak_plan(&ParallelConfig::new(4, 32, 0), model.params()).unwrap();
    assert_eq!(plan, crate::optim::LrPlan::Uniform(0.1));
}

#[test]
fn one_bad_shard_stops_every_worker() {
    let (model, mut data) = micro();
    data.inputs[5].data_mut()[0] = f64::NAN;
    for k in [1, 2, 4] {
        let r = train_parallel(&model, &data, None, &ParallelConfig::new(k, 2, 0), &cfg(1), None);
        assert!(matches!(r, Err(crate::Error::NonFiniteGradient(_))), "k={k}: {r:?}");
    }
}

#[test]
fn frozen_groups_unchanged_by_training() {
    let (model, data) = micro();
    let mut c = cfg(1);
    c.trainable_groups = Some(vec!["head".into()]);
    let out = train_parallel(&model, &data, None, &ParallelConfig::new(2, 4, 0), &c, None).unwrap();
    for g in ["stem", "stages", "top"] {
        assert_eq!(out.model.params().group_checksum(g), model.params().group_checksum(g));
    }
    assert_ne!(out.model.params().group_checksum("head"), model.params().group_checksum("head"));
}

#[test]
fn epoch_log_and_bench_shape() {
    let (model, data) = micro();
    let val = TrainData::new(data.inputs[..8].to_vec(), data.labels[..8].to_vec()).unwrap();
    let out = train_parallel(&model, &data, Some(&val), &ParallelConfig::new(1, 8, 0), &cfg(2), None).unwrap();
    assert_eq!(out.log.len(), 2);
    assert!(out.log.iter().all(|e| e.val_acc.is_some() && e.steps == 6 && e.lr == 0.05));
    let report = measure_speedup(&model, &data, &[2], &ParallelConfig::new(1, 2, 0), &cfg(1), 2, 1).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.speedup(1), Some(1.0));
    assert!(report.to_csv().starts_with("k,wall_seconds,samples_per_sec,speedup,efficiency\n1,"));
    assert!((SpeedupReport::reference_speedup() - 4.065).abs() < 0.01);
}
