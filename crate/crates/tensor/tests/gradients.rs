use gpla_tensor::gradcheck::check_params;
use gpla_tensor::nn::{Linear, TransformerBlock};
use gpla_tensor::{
    AttnSpec, GradAccumulator, Graph, Optimizer, ParamStore, Result, Scalar, Tensor, TensorError,
    Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect(),
    )
    .unwrap()
}

/// Projects `out` onto fixed random weights so every output element matters.
fn project<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(out).to_vec();
    let w = g.input(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Vec<usize>>,
    lo: f64,
    hi: f64,
    f: OpFn,
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: vec![vec![3, 4], vec![4, 5]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_nt",
            inputs: vec![vec![3, 4], vec![5, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.matmul_nt(v[0], v[1]),
        },
        OpCase {
            name: "transpose",
            inputs: vec![vec![3, 2]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.transpose(v[0]),
        },
        OpCase {
            name: "add_broadcast",
            inputs: vec![vec![3, 4], vec![4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: vec![vec![3, 4], vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            inputs: vec![vec![3, 4], vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "mul_broadcast",
            inputs: vec![vec![3, 4], vec![1, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.mul(v[0], v[1]),
        },
        OpCase {
            name: "mul_scalar",
            inputs: vec![vec![3, 4], vec![1, 1]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.mul_scalar(v[0], v[1]),
        },
        OpCase {
            name: "softmax",
            inputs: vec![vec![3, 5]],
            lo: -2.0,
            hi: 2.0,
            f: |g, v| g.softmax(v[0]),
        },
        OpCase {
            name: "log_softmax",
            inputs: vec![vec![3, 5]],
            lo: -2.0,
            hi: 2.0,
            f: |g, v| g.log_softmax(v[0]),
        },
        OpCase {
            name: "layer_norm",
            inputs: vec![vec![3, 6], vec![6], vec![6]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.layer_norm(v[0], v[1], v[2]),
        },
        // gelu's curvature is smooth; inputs stay away from large |x| only to keep values O(1)
        OpCase {
            name: "gelu",
            inputs: vec![vec![4, 4]],
            lo: -3.0,
            hi: 3.0,
            f: |g, v| Ok(g.gelu(v[0])),
        },
        OpCase {
            name: "tanh",
            inputs: vec![vec![4, 4]],
            lo: -2.0,
            hi: 2.0,
            f: |g, v| Ok(g.tanh(v[0])),
        },
        OpCase {
            name: "exp",
            inputs: vec![vec![2, 3]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| Ok(g.exp(v[0])),
        },
        OpCase {
            name: "log_sigmoid",
            inputs: vec![vec![2, 5]],
            lo: -6.0,
            hi: 6.0,
            f: |g, v| Ok(g.log_sigmoid(v[0])),
        },
        OpCase {
            name: "embedding",
            inputs: vec![vec![6, 3]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.embedding(v[0], &[1, 4, 1, 0]),
        },
        OpCase {
            name: "gather_rows",
            inputs: vec![vec![5, 3]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.gather_rows(v[0], &[4, 0, 4]),
        },
        OpCase {
            name: "pick",
            inputs: vec![vec![3, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.pick(v[0], &[3, 0, 2]),
        },
        OpCase {
            name: "slice_cols",
            inputs: vec![vec![3, 6]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.slice_cols(v[0], 2, 3),
        },
        OpCase {
            name: "concat_rows",
            inputs: vec![vec![2, 3], vec![1, 3]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.concat_rows(&[v[0], v[1]]),
        },
        OpCase {
            name: "concat_cols",
            inputs: vec![vec![2, 3], vec![2, 2]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.concat_cols(&[v[0], v[1]]),
        },
        OpCase {
            name: "mean",
            inputs: vec![vec![3, 3]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| Ok(g.mean(v[0])),
        },
        OpCase {
            name: "mean_pool_masked",
            inputs: vec![vec![6, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.mean_pool(v[0], 2, 3, Some(&[true, true, false, true, false, true])),
        },
        OpCase {
            name: "l2_normalize",
            inputs: vec![vec![3, 5]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.l2_normalize(v[0]),
        },
        OpCase {
            name: "attention_causal_masked",
            inputs: vec![vec![8, 4], vec![8, 4], vec![8, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| {
                let spec = AttnSpec::new(2, 4, 2)
                    .causal()
                    .with_key_mask(vec![true, true, true, false, true, true, true, true]);
                g.attention(v[0], v[1], v[2], spec)
            },
        },
        OpCase {
            name: "attention_bidirectional",
            inputs: vec![vec![6, 4], vec![6, 4], vec![6, 4]],
            lo: -1.0,
            hi: 1.0,
            f: |g, v| g.attention(v[0], v[1], v[2], AttnSpec::new(2, 3, 1)),
        },
    ]
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (ci, case) in cases().into_iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let ids: Vec<_> = case
            .inputs
            .iter()
            .enumerate()
            .map(|(i, s)| store.add(format!("in{i}"), rand_tensor(&mut rng, s, case.lo, case.hi)))
            .collect();
        let f = case.f;
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = f(g, &vars)?;
            project(g, out, 1000 + ci as u64)
        };
        let report = check_params(&store, loss, 30, 1e-3, 1e-8, ci as u64, None).unwrap();
        let worst = report.worst().unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "{}: rel err {} at {:?}",
            case.name,
            report.max_rel_err(),
            worst
        );
    }
}

fn block_loss<'a, T: Scalar>(
    block: &'a TransformerBlock,
    head: &'a Linear,
    x: &Tensor<T>,
) -> impl Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var> + 'a {
    let x = x.clone();
    move |g, s| {
        let xin = g.input(x.clone());
        let spec = AttnSpec::new(2, 5, 4).with_key_mask(vec![
            true, true, true, true, false, true, true, true, true, true,
        ]);
        let h = block.forward(g, s, xin, &spec)?;
        let pooled = g.mean_pool(
            h,
            2,
            5,
            Some(&[true, true, true, true, false, true, true, true, true, true]),
        )?;
        let out = head.forward(g, s, pooled)?;
        let t = g.tanh(out);
        let sq = g.mul(t, t)?;
        Ok(g.mean(sq))
    }
}

#[test]
fn transformer_block_gradients_f64_and_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let block = TransformerBlock::new(&mut store, "blk", 8, 4, 2, &mut rng);
    let head = Linear::new(&mut store, "head", 8, 3, &mut rng);
    let x32: Tensor<f32> = rand_tensor(&mut rng, &[10, 8], -1.0, 1.0);

    let s64 = store.cast::<f64>();
    let r64 = check_params(
        &s64,
        block_loss(&block, &head, &x32.cast()),
        40,
        1e-4,
        1e-10,
        3,
        None,
    )
    .unwrap();
    assert!(r64.max_rel_err() < 1e-5, "f64 worst {:?}", r64.worst());

    let r32 = check_params(
        &store,
        block_loss(&block, &head, &x32),
        40,
        1e-2,
        1e-2,
        3,
        None,
    )
    .unwrap();
    assert!(r32.max_rel_err() < 1e-2, "f32 worst {:?}", r32.worst());
}

#[test]
fn sum_of_squares_gradient_and_accumulation() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let sq = g.mul(wv, wv).unwrap();
    let loss = g.sum(sq);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad, vec![2.0, 4.0]);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad, vec![4.0, 8.0]);
}

#[test]
fn backward_on_non_scalar_is_contract_error() {
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut g = Graph::new();
    let wv = g.param(&store, w);
    let y = g.scale(wv, 3.0);
    assert!(matches!(
        g.backward(y, &mut store),
        Err(TensorError::Contract(_))
    ));
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn l2_normalize_gives_unit_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::<f32>::new();
    let x = g.input(rand_tensor(&mut rng, &[6, 9], -3.0, 3.0));
    let y = g.l2_normalize(x).unwrap();
    for i in 0..6 {
        let n: f32 = g.value(y).row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

/// Linear model with mean-squared loss: accumulating four micro-batches of
/// 64 must give the same update as one batch of 256.
#[test]
fn accumulated_micro_batches_match_one_large_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Tensor<f32> = rand_tensor(&mut rng, &[256, 3], -1.0, 1.0);
    let ys: Tensor<f32> = rand_tensor(&mut rng, &[256, 1], -1.0, 1.0);
    let mut base = ParamStore::<f32>::new();
    let lin = Linear::new(&mut base, "lin", 3, 1, &mut rng);

    let batch_loss =
        |g: &mut Graph<f32>, s: &ParamStore<f32>, rows: std::ops::Range<usize>| -> Var {
            let idx: Vec<usize> = rows.collect();
            let xin = g.input(xs.clone());
            let yin = g.input(ys.clone());
            let x = g.gather_rows(xin, &idx).unwrap();
            let y = g.gather_rows(yin, &idx).unwrap();
            let p = lin.forward(g, s, x).unwrap();
            let d = g.sub(p, y).unwrap();
            let sq = g.mul(d, d).unwrap();
            g.mean(sq)
        };

    let mut big = base.clone();
    let mut opt_big = Optimizer::adamw(1e-2, 0.0, &big);
    let mut g = Graph::new();
    let l = batch_loss(&mut g, &big, 0..256);
    g.backward(l, &mut big).unwrap();
    let big_grads: Vec<Vec<f32>> = big.iter().map(|(_, p)| p.grad.clone()).collect();
    opt_big.step(&mut big, None).unwrap();

    let mut small = base.clone();
    let mut opt_small = Optimizer::adamw(1e-2, 0.0, &small);
    let mut acc = GradAccumulator::new(4).unwrap();
    let mut stepped = 0;
    for m in 0..4 {
        let mut g = Graph::new();
        let l = batch_loss(&mut g, &small, m * 64..(m + 1) * 64);
        g.backward(l, &mut small).unwrap();
        if m == 3 {
            let acc_grads: Vec<Vec<f32>> = small
                .iter()
                .map(|(_, p)| p.grad.iter().map(|v| v / 4.0).collect())
                .collect();
            for (a, b) in acc_grads.iter().flatten().zip(big_grads.iter().flatten()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
        if acc
            .micro_step(&mut opt_small, &mut small, None)
            .unwrap()
            .is_some()
        {
            stepped += 1;
        }
    }
    assert_eq!(stepped, 1);
    assert_eq!(opt_small.step_count, 1);
    for ((_, a), (_, b)) in small.iter().zip(big.iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    // n_micro = 1 is plain stepping
    let mut one = base.clone();
    let mut plain = base.clone();
    let mut o1 = Optimizer::adamw(1e-2, 0.0, &one);
    let mut o2 = Optimizer::adamw(1e-2, 0.0, &plain);
    let mut acc1 = GradAccumulator::new(1).unwrap();
    for s in [&mut one, &mut plain] {
        let mut g = Graph::new();
        let l = batch_loss(&mut g, s, 0..64);
        g.backward(l, s).unwrap();
    }
    acc1.micro_step(&mut o1, &mut one, Some(1.0))
        .unwrap()
        .unwrap();
    o2.step(&mut plain, Some(1.0)).unwrap();
    assert!(one.bit_identical(&plain));
}

#[test]
fn graph_free_block_matches_graph_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f32>::new();
    let block = TransformerBlock::new(&mut store, "b", 8, 2, 4, &mut rng);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[6, 8], -1.0, 1.0);
    let spec = AttnSpec::new(1, 6, 2).causal();
    let mut g = Graph::new();
    let xin = g.input(x.clone());
    let y = block.forward(&mut g, &store, xin, &spec).unwrap();
    let y2 = block.apply(&store, x.data(), &spec);
    assert_eq!(g.value(y).data(), y2.as_slice());
}
