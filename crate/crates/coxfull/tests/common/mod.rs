//! Shared helpers for the integration suites: a randomized small-instance
//! generator covering metric covariates, a dummy-coded factor group,
//! optional frailties, and an optional time-varying effect.

use coxfull::data::{dataset_from_subjects, CovGroup, Dataset, Subject};
use coxfull::model::{Design, FrailtyCovariance, ModelSpec, ParameterState, PenaltyConfig};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub data: Dataset,
    pub spec: ModelSpec,
    pub design: Design,
    pub state: ParameterState,
    pub pen: PenaltyConfig,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_frailty = seed % 2 == 0;
    let with_tv = seed % 3 == 0;
    let with_factor = seed % 4 != 1;
    let n_metric = 1 + (rng.random::<f64>() * 2.0) as usize;
    let n_subjects = 8 + (rng.random::<f64>() * 23.0) as usize;
    let n_clusters = if with_frailty {
        2 + (rng.random::<f64>() * 4.0) as usize
    } else {
        n_subjects
    };

    let mut names: Vec<String> = (0..n_metric).map(|j| format!("x{j}")).collect();
    let mut groups: Vec<CovGroup> = (0..n_metric)
        .map(|j| CovGroup {
            label: format!("x{j}"),
            cols: j..j + 1,
            df: 1,
            is_factor: false,
        })
        .collect();
    if with_factor {
        let lo = names.len();
        names.push("f=b".into());
        names.push("f=c".into());
        groups.push(CovGroup {
            label: "f".into(),
            cols: lo..lo + 2,
            df: 2,
            is_factor: true,
        });
    }
    if with_tv {
        let lo = names.len();
        names.push("zt".into());
        groups.push(CovGroup {
            label: "zt".into(),
            cols: lo..lo + 1,
            df: 1,
            is_factor: false,
        });
    }
    let n_cols = names.len();

    let mut subjects = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let cluster = if with_frailty {
            format!("c{}", i % n_clusters)
        } else {
            format!("{i}")
        };
        let n_ep = 1 + (rng.random::<f64>() * 3.0) as usize;
        let zt_value = rng.random::<f64>() * 2.0 - 1.0;
        let mut t = 0.0;
        let mut track = Vec::with_capacity(n_ep);
        for e in 0..n_ep {
            let mut x = Vec::with_capacity(n_cols);
            for _ in 0..n_metric {
                x.push(rng.random::<f64>() * 2.0 - 1.0);
            }
            if with_factor {
                let level = (rng.random::<f64>() * 3.0) as usize;
                x.push((level == 1) as u8 as f64);
                x.push((level == 2) as u8 as f64);
            }
            if with_tv {
                x.push(zt_value);
            }
            track.push((t, x));
            if e + 1 < n_ep {
                t += 0.2 + 1.2 * rng.random::<f64>();
            }
        }
        let exit = t + 0.2 + 1.2 * rng.random::<f64>();
        subjects.push(Subject {
            subject_id: format!("{i}"),
            cluster_id: cluster,
            entry_time: 0.0,
            exit_time: exit,
            event: rng.random::<f64>() < 0.6,
            covariate_track: track,
        });
    }
    // At least one event: the likelihood needs it for sensible starts.
    if !subjects.iter().any(|s| s.event) {
        subjects[0].event = true;
    }

    let data = dataset_from_subjects(subjects, names, groups).expect("valid subjects");
    let mut spec = ModelSpec {
        frailty: with_frailty,
        ..Default::default()
    };
    if with_tv {
        spec.penalized = data
            .groups
            .iter()
            .map(|g| g.label.clone())
            .filter(|l| l != "zt")
            .collect();
        spec.tv = vec!["zt".into()];
    }
    let design = spec.resolve(&data).expect("resolvable model");

    let mut state = ParameterState::zeros(&design);
    state.beta = DVector::from_fn(design.p(), |_, _| {
        if rng.random::<f64>() < 0.3 {
            0.0
        } else {
            rng.random::<f64>() * 1.2 - 0.6
        }
    });
    state.alpha = DVector::from_fn(design.alpha_dim(), |i, _| {
        let base = if i < design.m() { -0.5 } else { 0.0 };
        base + rng.random::<f64>() * 0.8 - 0.4
    });
    if design.frailty {
        state.b = DVector::from_fn(design.b_dim(), |_, _| rng.random::<f64>() - 0.5);
        let var = 0.2 + 0.8 * rng.random::<f64>();
        state.theta = FrailtyCovariance::diagonal(design.q, var).theta().clone();
    }
    state.zeta = DVector::from_fn(design.n_smooth(), |_, _| {
        (rng.random::<f64>() * (30.0f64.ln() - 0.3f64.ln()) + 0.3f64.ln()).exp()
    });

    let xi = if rng.random::<f64>() < 0.25 {
        0.0
    } else {
        0.05 + 1.95 * rng.random::<f64>()
    };
    let weights: Vec<f64> = design
        .groups
        .iter()
        .map(|_| 0.5 + 1.5 * rng.random::<f64>())
        .collect();
    let pen = PenaltyConfig::with_weights(&design, xi, weights);

    Instance {
        data,
        spec,
        design,
        state,
        pen,
    }
}
