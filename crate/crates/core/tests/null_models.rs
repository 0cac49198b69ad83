use std::collections::HashMap;

use frustra::graph_builder::{assemble, NO_PARAM};
use frustra::model_ir::synthetic::{generate_synthetic, Template};
use frustra::model_ir::LayerOp;
use frustra::null_models::{
    fans, generate_null, he_std, n1_shuffle, n2_shuffle, n3_reinit, xavier_bound, InitScheme,
    NullModelKind, NullModelSpec,
};

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

#[test]
fn n1_keeps_every_copy_of_a_slot_equal() {
    let model = generate_synthetic(6, Template::GroupedCnn).unwrap();
    let graph = assemble(&model).unwrap();
    for seed in 0..20 {
        let shuffled = n1_shuffle(&graph, seed).unwrap();
        let mut slot_value: HashMap<(u32, u32), f64> = HashMap::new();
        for k in 0..graph.edge_count() {
            let p = graph.provenance(k);
            let w = shuffled.weights()[k];
            if p.param == NO_PARAM {
                assert_eq!(w, graph.weights()[k]);
                continue;
            }
            assert_eq!(*slot_value.entry((p.layer, p.param)).or_insert(w), w);
        }
    }
}

#[test]
fn n2_breaks_toeplitz_classes_but_keeps_the_sorted_weights() {
    let model = generate_synthetic(1, Template::TinyCnn).unwrap();
    let graph = assemble(&model).unwrap();
    let shuffled = n2_shuffle(&graph, 99).unwrap();
    assert_eq!(shuffled.row_ptr(), graph.row_ptr());
    assert_eq!(shuffled.cols(), graph.cols());

    let param_edges = |g: &frustra::graph_builder::SignedSparseGraph| -> Vec<f64> {
        (0..g.edge_count())
            .filter(|&k| graph.provenance(k).param != NO_PARAM)
            .map(|k| g.weights()[k])
            .collect()
    };
    assert_eq!(sorted(param_edges(&graph)), sorted(param_edges(&shuffled)));

    let mut classes: HashMap<(u32, u32), Vec<f64>> = HashMap::new();
    for k in 0..graph.edge_count() {
        let p = graph.provenance(k);
        if p.param != NO_PARAM {
            classes
                .entry((p.layer, p.param))
                .or_default()
                .push(shuffled.weights()[k]);
        }
    }
    let broken = classes
        .values()
        .filter(|v| v.iter().any(|&w| w != v[0]))
        .count();
    assert!(broken >= 1);
}

#[test]
fn n3_weights_respect_the_initializer_bounds() {
    let model = generate_synthetic(0, Template::TinyCnn).unwrap();
    let fresh = n3_reinit(&model, InitScheme::XavierUniform, 4).unwrap();
    let m = &fresh.manifest;
    for layer in 0..m.layers().len() {
        let Some((fan_in, fan_out)) = fans(m.op(layer)) else {
            continue;
        };
        let bound = xavier_bound(fan_in, fan_out);
        let w = fresh.weights(layer).unwrap();
        assert!(w
            .iter()
            .all(|&v| v != 0.0 && f64::from(v).abs() <= bound * (1.0 + 1e-6)));
        assert!(fresh.bias(layer).unwrap().iter().all(|&b| b == 0.0));
    }
    assert_eq!(
        assemble(&fresh).unwrap().cols(),
        assemble(&model).unwrap().cols()
    );
}

#[test]
fn conv_fans_divide_input_channels_by_groups() {
    let model = generate_synthetic(0, Template::GroupedCnn).unwrap();
    let m = &model.manifest;
    let layer = m.layer_index("gconv1").unwrap();
    let LayerOp::Conv(g) = m.op(layer) else {
        panic!("gconv1 is not a convolution")
    };
    assert_eq!(
        fans(m.op(layer)),
        Some((9 * g.in_c / g.groups, 9 * g.out_c))
    );
}

#[test]
fn he_normal_draws_have_zero_mean_and_unit_scaled_variance() {
    let model = generate_synthetic(0, Template::TinyCnn).unwrap();
    let fc2 = model.manifest.layer_index("fc2").unwrap();
    let (fan_in, _) = fans(model.manifest.op(fc2)).unwrap();
    let sigma = he_std(fan_in);
    let mut z = Vec::new();
    for seed in 0..7 {
        let fresh = n3_reinit(&model, InitScheme::HeNormal, seed).unwrap();
        z.extend(
            fresh
                .weights(fc2)
                .unwrap()
                .iter()
                .map(|&w| f64::from(w) / sigma),
        );
    }
    let n = z.len() as f64;
    assert!(n >= 1e5);
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() <= 3.0 / n.sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn generate_null_dispatches_and_is_seed_deterministic() {
    let model = generate_synthetic(3, Template::ResidualCnn).unwrap();
    let graph = assemble(&model).unwrap();
    for (kind, init) in [
        (NullModelKind::N1, None),
        (NullModelKind::N2, None),
        (NullModelKind::N3, Some(InitScheme::HeNormal)),
    ] {
        let a = generate_null(&model, &graph, &NullModelSpec::new(kind, 5, init).unwrap()).unwrap();
        let b = generate_null(&model, &graph, &NullModelSpec::new(kind, 5, init).unwrap()).unwrap();
        let c = generate_null(&model, &graph, &NullModelSpec::new(kind, 6, init).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weights(), c.weights());
        assert_eq!(a.cols(), graph.cols());
    }
}
