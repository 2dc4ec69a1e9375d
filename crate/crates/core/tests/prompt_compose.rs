use proptest::prelude::*;
use rolling_dfo::blackbox::{BlackBox, ProjectedObjective, SeparableObjective, LayerFunction};
use rolling_dfo::prompt::{
    compose_from_slices, make_projection, InitialPromptSet, ProjectionMatrix, PromptBlock,
};
use rolling_dfo::scheduler::{Scheduler, SchedulerConfig, StrategyKind};
use rolling_dfo::RngStream;

fn setup(layers: usize, dim: usize, n_p: usize, width: usize, seed: u64) -> (Vec<ProjectionMatrix>, InitialPromptSet) {
    let root = RngStream::new(seed, "compose");
    let projections = (0..layers)
        .map(|i| make_projection(i, dim, n_p, width, 1.0, &mut root.fork(&format!("a{i}"))).unwrap())
        .collect();
    let mut r = root.fork("p0");
    let blocks = (0..layers)
        .map(|i| PromptBlock::new(i, n_p, width, r.normal_vec(n_p * width)).unwrap())
        .collect();
    (projections, InitialPromptSet::new(blocks, vec![0; n_p]).unwrap())
}

// straight-line reference: p = A z + p0, one entry at a time
fn reference(a: &ProjectionMatrix, z: &[f64], p0: &PromptBlock) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..a.rows() {
        let mut acc = 0.0;
        for c in 0..a.cols() {
            acc += a.get(r, c) * z[c];
        }
        out.push(acc + p0.values()[r]);
    }
    out
}

#[test]
fn zero_vectors_reproduce_initial_prompts_bit_exactly() {
    let (proj, init) = setup(4, 6, 3, 8, 11);
    let zeros = vec![vec![0.0; 6]; 4];
    let ps = compose_from_slices(&zeros, &proj, &init).unwrap();
    for (got, want) in ps.blocks().iter().zip(init.blocks()) {
        let g: Vec<u64> = got.values().iter().map(|v| v.to_bits()).collect();
        let w: Vec<u64> = want.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(g, w);
    }
}

#[test]
fn matches_scalar_reference() {
    let (proj, init) = setup(3, 5, 2, 4, 3);
    let mut r = RngStream::new(9, "z");
    let zs: Vec<Vec<f64>> = (0..3).map(|_| r.normal_vec(5)).collect();
    let ps = compose_from_slices(&zs, &proj, &init).unwrap();
    for i in 0..3 {
        let want = reference(&proj[i], &zs[i], &init.blocks()[i]);
        for (a, b) in ps.blocks()[i].values().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_is_affine(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let (proj, init) = setup(2, 4, 3, 5, seed);
        let mut r = RngStream::new(seed, "pair");
        let z1: Vec<Vec<f64>> = (0..2).map(|_| r.normal_vec(4)).collect();
        let z2: Vec<Vec<f64>> = (0..2).map(|_| r.normal_vec(4)).collect();
        let mix: Vec<Vec<f64>> = z1
            .iter()
            .zip(&z2)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| alpha * x + beta * y).collect())
            .collect();
        let zero = vec![vec![0.0; 4]; 2];
        let p1 = compose_from_slices(&z1, &proj, &init).unwrap();
        let p2 = compose_from_slices(&z2, &proj, &init).unwrap();
        let pm = compose_from_slices(&mix, &proj, &init).unwrap();
        let p0 = compose_from_slices(&zero, &proj, &init).unwrap();
        for i in 0..2 {
            let (b1, b2, bm, b0) = (&p1.blocks()[i], &p2.blocks()[i], &pm.blocks()[i], &p0.blocks()[i]);
            for k in 0..bm.values().len() {
                let lhs = bm.values()[k] - b0.values()[k];
                let rhs = alpha * (b1.values()[k] - b0.values()[k]) + beta * (b2.values()[k] - b0.values()[k]);
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn projection_std_near_inverse_sqrt_dim() {
    let a = make_projection(0, 10, 40, 32, 1.0, &mut RngStream::new(5, "std")).unwrap();
    let n = a.entries().len() as f64;
    let mean = a.entries().iter().sum::<f64>() / n;
    let var = a.entries().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let target = 1.0 / 10f64.sqrt();
    assert!((var.sqrt() - target).abs() / target < 0.05, "std {}", var.sqrt());
}

#[test]
fn projections_are_untouched_by_a_run() {
    let (proj, init) = setup(3, 4, 2, 6, 21);
    let before: Vec<String> = proj.iter().map(|p| p.content_hash()).collect();
    let optima = compose_from_slices(&vec![vec![0.5; 4]; 3], &proj, &init).unwrap();
    let objective = SeparableObjective::new(optima.blocks().to_vec(), vec![LayerFunction::Sphere; 3]).unwrap();
    let bb = BlackBox::new(objective);
    let projected = ProjectedObjective {
        projections: &proj,
        initial: &init,
        blackbox: &bb,
    };
    for kind in StrategyKind::ALL {
        let cfg = SchedulerConfig::new(3, 4, 6, 0.5, kind).with_counts(1, 1, 1);
        let mut s = Scheduler::new(cfg, &RngStream::new(1, "run")).unwrap();
        s.run(&projected, 120).unwrap();
    }
    let after: Vec<String> = proj.iter().map(|p| p.content_hash()).collect();
    assert_eq!(before, after);
    assert_eq!(bb.calls(), 3 * 120);
}

#[test]
fn layer_order_and_shape_errors() {
    let (proj, init) = setup(2, 3, 2, 2, 1);
    assert!(compose_from_slices(&[vec![0.0; 3]], &proj, &init).is_err());
    assert!(compose_from_slices(&[vec![0.0; 3], vec![0.0; 2]], &proj, &init).is_err());
    let swapped = vec![proj[1].clone(), proj[0].clone()];
    assert!(compose_from_slices(&[vec![0.0; 3], vec![0.0; 3]], &swapped, &init).is_err());
}
