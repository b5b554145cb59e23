use rnce_lab::encoder::{EncoderConfig, ModelParams, ParamSet, RegionLayout, ViewItems};
use rnce_lab::evalstats::{recovery_r2, ProbeSettings};
use rnce_lab::losses::cosine_similarity_rows;
use rnce_lab::parallel::ExecMode;
use rnce_lab::synthgen::{generate_cohort, Cohort, CohortConfig};
use rnce_lab::trainer::{
    embed_cohort, train_aggregator, train_patch_models, train_region, Level, Method, SubsetSplit, TrainConfig,
};

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        hidden_layers: 1,
        hidden_width: 16,
        embed_dim: 16,
        n_blocks: 1,
        n_heads: 2,
        mlp_width: 16,
        ..Default::default()
    }
}

fn small_cohort(seed: u64) -> Cohort {
    generate_cohort(&CohortConfig {
        n_subjects: 300,
        layout: RegionLayout::standard(8),
        representation_dim: 16,
        seed,
        ..Default::default()
    })
    .unwrap()
    .0
}

fn cfg(method: Method, level: Level, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 32,
        learning_rate: 1e-3,
        seed: 5,
        ..TrainConfig::defaults(method, level)
    }
}

#[test]
fn zero_steps_keeps_initialization() {
    let c = small_cohort(1);
    let enc = small_encoder();
    let layout = c.layout();
    let init = ModelParams::init(layout, &enc, 5).unwrap();
    for m in Method::ALL {
        let p = train_patch_models(&c.pretrain, layout, &enc, &cfg(m, Level::Patch, 0), ExecMode::Sequential).unwrap();
        assert_eq!(p.params, init.patches);
        assert!(p.reports.iter().all(|r| r.loss_trace.is_empty()));
        let (agg, rep) =
            train_aggregator(&c.pretrain, layout, &p.params, &enc, &cfg(m, Level::Aggregate, 0), SubsetSplit::Random)
                .unwrap();
        assert_eq!(agg, init.aggregator);
        assert!(rep.loss_trace.is_empty());
    }
}

#[test]
fn parallel_patch_training_matches_sequential() {
    let c = small_cohort(2);
    let enc = small_encoder();
    for m in Method::ALL {
        let tc = cfg(m, Level::Patch, 5);
        let seq = train_patch_models(&c.pretrain, c.layout(), &enc, &tc, ExecMode::Sequential).unwrap();
        let par = train_patch_models(&c.pretrain, c.layout(), &enc, &tc, ExecMode::Parallel).unwrap();
        assert_eq!(seq.params, par.params, "{m}");
        for (a, b) in seq.reports.iter().zip(&par.reports) {
            assert_eq!(a.loss_trace, b.loss_trace);
            assert_eq!(a.params_checksum, b.params_checksum);
        }
    }
}

#[test]
fn region_training_is_independent_of_other_regions() {
    let c = small_cohort(3);
    let enc = small_encoder();
    let tc = cfg(Method::Rnce, Level::Patch, 4);
    let all = train_patch_models(&c.pretrain, c.layout(), &enc, &tc, ExecMode::Sequential).unwrap();
    let init = ModelParams::init(c.layout(), &enc, tc.seed).unwrap();
    let (alone, _) = train_region(&c.pretrain, c.layout(), 5, &enc, &tc, init.patches[5].clone()).unwrap();
    assert_eq!(alone, all.params[5]);
}

#[test]
fn full_batch_losses_decrease_on_small_cohort() {
    let c = small_cohort(4);
    let enc = small_encoder();
    let full = |m, level| TrainConfig {
        batch_size: c.pretrain.len(),
        ..cfg(m, level, 120)
    };
    for m in Method::ALL {
        let p = train_patch_models(&c.pretrain, c.layout(), &enc, &full(m, Level::Patch), ExecMode::Parallel).unwrap();
        for r in &p.reports {
            let (first, last) = r.window_means(20).unwrap();
            assert!(last < first, "{m} {:?}: {first} -> {last}", r.region);
            assert!(r.loss_trace.iter().all(|v| v.is_finite()));
        }
        let (_, rep) = train_aggregator(
            &c.pretrain,
            c.layout(),
            &p.params,
            &enc,
            &full(m, Level::Aggregate),
            SubsetSplit::Random,
        )
        .unwrap();
        let (first, last) = rep.window_means(20).unwrap();
        assert!(last < first, "{m} aggregate: {first} -> {last}");
    }
}

#[test]
fn default_cohort_rnce_loss_decreases_in_200_steps() {
    let (c, _) = generate_cohort(&CohortConfig::default()).unwrap();
    let enc = EncoderConfig::default();
    let tc = TrainConfig {
        steps: 200,
        ..TrainConfig::defaults(Method::Rnce, Level::Patch)
    };
    let init = ModelParams::init(c.layout(), &enc, tc.seed).unwrap();
    for l in [0, 9] {
        let (_, r) = train_region(&c.pretrain, c.layout(), l, &enc, &tc, init.patches[l].clone()).unwrap();
        let (first, last) = r.window_means(20).unwrap();
        assert!(last < first, "region {l}: {first} -> {last}");
    }
}

#[test]
fn aggregator_training_leaves_patches_frozen() {
    let c = small_cohort(5);
    let enc = small_encoder();
    let p = train_patch_models(&c.pretrain, c.layout(), &enc, &cfg(Method::Simclr, Level::Patch, 3), ExecMode::Parallel)
        .unwrap();
    let before: Vec<u64> = p.params.iter().map(ParamSet::checksum).collect();
    let snapshot = p.params.clone();
    let (_, rep) = train_aggregator(
        &c.pretrain,
        c.layout(),
        &p.params,
        &enc,
        &cfg(Method::Simclr, Level::Aggregate, 10),
        SubsetSplit::Random,
    )
    .unwrap();
    assert_eq!(p.params, snapshot);
    assert_eq!(before, p.params.iter().map(ParamSet::checksum).collect::<Vec<_>>());
    assert!(rep.frozen_checksum.is_some());
}

#[test]
fn identical_subsets_give_unit_positive_similarity() {
    let c = small_cohort(6);
    let enc = small_encoder();
    let params = ModelParams::init(c.layout(), &enc, 9).unwrap();
    let n_regions = c.layout().len();
    let table = embed_cohort(&c.eval, c.layout(), &params.patches, &params.aggregator, &enc).unwrap();
    let mut rows = rnce_lab::DenseMatrix::zeros(n_regions * 4, enc.embed_dim);
    for (l, (_, e)) in table.regions.iter().enumerate() {
        for k in 0..4 {
            rows.row_mut(l * 4 + k).copy_from_slice(e.row(k));
        }
    }
    let views: Vec<ViewItems> = (0..4)
        .flat_map(|k| {
            let all: ViewItems = (0..n_regions).map(|l| (l, l * 4 + k)).collect();
            [all.clone(), all]
        })
        .collect();
    let out = params.aggregator.embed_views(&enc, &rows, &views).unwrap();
    let sims = cosine_similarity_rows(&out, &out).unwrap();
    for k in 0..4 {
        assert!((sims.get(2 * k, 2 * k + 1) - 1.0).abs() < 1e-12);
    }
    let (_, rep) = train_aggregator(
        &c.pretrain,
        c.layout(),
        &params.patches,
        &enc,
        &cfg(Method::Simclr, Level::Aggregate, 2),
        SubsetSplit::AllInBoth,
    )
    .unwrap();
    assert_eq!(rep.loss_trace.len(), 2);
}

#[test]
fn embeddings_are_deterministic_and_bounded() {
    let c = small_cohort(7);
    let enc = small_encoder();
    let p = train_patch_models(&c.pretrain, c.layout(), &enc, &cfg(Method::Rnce, Level::Patch, 10), ExecMode::Parallel)
        .unwrap();
    let (agg, _) = train_aggregator(
        &c.pretrain,
        c.layout(),
        &p.params,
        &enc,
        &cfg(Method::Rnce, Level::Aggregate, 10),
        SubsetSplit::Random,
    )
    .unwrap();
    let a = embed_cohort(&c.eval, c.layout(), &p.params, &agg, &enc).unwrap();
    let b = embed_cohort(&c.eval, c.layout(), &p.params, &agg, &enc).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.image.rows(), c.eval.len());
    assert_eq!(a.regions.len(), c.layout().len());
    assert!(a.image.is_finite() && a.image.max_abs() < 1e4);
    assert!(a.regions.iter().all(|(_, m)| m.is_finite() && m.max_abs() < 1e4));
}

#[test]
fn full_training_is_reproducible() {
    let c = small_cohort(8);
    let enc = small_encoder();
    let run = || {
        let p = train_patch_models(&c.pretrain, c.layout(), &enc, &cfg(Method::Barlow, Level::Patch, 5), ExecMode::Parallel)
            .unwrap();
        let (agg, rep) = train_aggregator(
            &c.pretrain,
            c.layout(),
            &p.params,
            &enc,
            &cfg(Method::Barlow, Level::Aggregate, 5),
            SubsetSplit::Random,
        )
        .unwrap();
        (p.params, agg, rep.loss_trace)
    };
    assert_eq!(run(), run());
}

#[test]
fn rnce_patches_carry_more_auxiliary_signal_than_simclr() {
    let (c, _) = generate_cohort(&CohortConfig::default()).unwrap();
    let enc = EncoderConfig {
        hidden_width: 64,
        mlp_width: 64,
        ..Default::default()
    };
    let region = 0;
    let cols = c.layout().region(region).aux_columns.clone();
    let init = ModelParams::init(c.layout(), &enc, 0).unwrap();
    let mut r2 = Vec::new();
    for m in [Method::Rnce, Method::Simclr] {
        let tc = TrainConfig {
            steps: 300,
            batch_size: 64,
            learning_rate: 1e-3,
            ..TrainConfig::defaults(m, Level::Patch)
        };
        let (params, _) = train_region(&c.pretrain, c.layout(), region, &enc, &tc, init.patches[region].clone()).unwrap();
        let r = c.layout().region(region);
        let train = params.embed_rows(r, &c.pretrain.regions[region]).unwrap();
        let test = params.embed_rows(r, &c.eval.regions[region]).unwrap();
        r2.push(
            recovery_r2(
                &train,
                &c.pretrain.aux.select_cols(&cols),
                &test,
                &c.eval.aux.select_cols(&cols),
                &ProbeSettings::default(),
            )
            .unwrap(),
        );
    }
    assert!(r2[0] > r2[1], "rnce {} vs simclr {}", r2[0], r2[1]);
}
