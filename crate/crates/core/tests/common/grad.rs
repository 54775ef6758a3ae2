//! Finite-difference checks of every tape op and of the composite blocks.

use blora::{AttentionLayer, BLoraLinear, Mode, QuantizerConfig, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{fd_grad, max_rel_err, rng, tensor, uniform, FD_STEP, FD_TOLERANCE};

#[derive(Clone, Copy)]
pub enum Draw {
    /// Uniform on [−2, 2].
    Plain,
    /// Uniform on [0.1, 2].
    Positive,
    /// Uniform on [−2, 2] at least 0.01 from every listed kink.
    AwayFrom(&'static [f64]),
}

fn draw(rng: &mut ChaCha8Rng, n: usize, how: Draw) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let x = match how {
                Draw::Positive => rng.random_range(0.1..2.0),
                _ => rng.random_range(-2.0..2.0),
            };
            match how {
                Draw::AwayFrom(kinks) if kinks.iter().any(|k| (x - k).abs() < 0.01) => continue,
                _ => break x,
            }
        })
        .collect()
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var + Sync>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Draw)>,
    pub op: OpFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Draw)], op: impl Fn(&mut Tape, &[Var]) -> Var + Sync + 'static) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        op: Box::new(op),
    }
}

const P: Draw = Draw::Plain;

/// Every differentiable op. `round_ste` is checked separately: its
/// backward is the identity by definition.
pub fn op_cases() -> Vec<OpCase> {
    let m: &[usize] = &[3, 4];
    let v: &[usize] = &[7];
    vec![
        case("matmul", &[(&[3, 4], P), (&[4, 2], P)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("add", &[(m, P), (m, P)], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[(m, P), (m, P)], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[(m, P), (m, P)], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("add_row", &[(m, P), (&[4], P)], |t, v| t.add_row(v[0], v[1]).unwrap()),
        case("mul_row", &[(m, P), (&[4], P)], |t, v| t.mul_row(v[0], v[1]).unwrap()),
        case("mul_scalar", &[(m, P), (&[], P)], |t, v| t.mul_scalar(v[0], v[1]).unwrap()),
        case("scale", &[(v, P)], |t, v| t.scale(v[0], -1.7)),
        case("offset", &[(v, P)], |t, v| t.offset(v[0], 0.3)),
        case("sum", &[(&[2, 3], P)], |t, v| t.sum(v[0])),
        case("mean", &[(&[2, 3], P)], |t, v| t.mean(v[0])),
        case("cumprod", &[(&[6], P)], |t, v| t.cumprod(v[0])),
        case("exp", &[(v, P)], |t, v| t.exp(v[0])),
        case("log", &[(v, Draw::Positive)], |t, v| t.log(v[0])),
        case("sigmoid", &[(v, P)], |t, v| t.sigmoid(v[0])),
        case("tanh", &[(v, P)], |t, v| t.tanh(v[0])),
        case("relu", &[(v, Draw::AwayFrom(&[0.0]))], |t, v| t.relu(v[0])),
        case("clip", &[(v, Draw::AwayFrom(&[-1.0, 1.0]))], |t, v| t.clip(v[0], -1.0, 1.0).unwrap()),
        case("softmax", &[(&[3, 5], P)], |t, v| t.softmax(v[0])),
        case("layer_norm", &[(&[3, 5], P)], |t, v| t.layer_norm(v[0])),
        case("cross_entropy", &[(&[4, 3], P)], |t, v| t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()),
        case("concat", &[(&[3], P), (&[2], P)], |t, v| t.concat(&[v[0], v[1]])),
        case("select", &[(&[4], P)], |t, v| t.select(v[0], 2).unwrap()),
        case("slice2d", &[(&[4, 5], P)], |t, v| t.slice2d(v[0], 1, 2, 2, 3).unwrap()),
        case("concat_rows", &[(&[2, 3], P), (&[1, 3], P)], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        case("concat_cols", &[(&[2, 3], P), (&[2, 1], P)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        case("transpose", &[(&[2, 3], P)], |t, v| t.transpose(v[0]).unwrap()),
        case("reshape", &[(&[2, 3], P)], |t, v| t.reshape(v[0], vec![3, 2]).unwrap()),
    ]
}

/// `Σ w ⊙ op(inputs)`, with the inputs as leaves or constants.
fn contract(c: &OpCase, inputs: &[Tensor], w: Option<&[f64]>, leaf: bool) -> (Tape, Vec<Var>, Var, usize) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if leaf { tape.leaf(&t.clone().with_grad()) } else { tape.constant(t) })
        .collect();
    let out = (c.op)(&mut tape, &vars);
    let n = tape.value(out).len();
    let shape = tape.shape(out).to_vec();
    let weights = w.map_or_else(|| vec![1.0; n], <[f64]>::to_vec);
    let wv = tape.constant(&Tensor::new(shape, weights).unwrap());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss, n)
}

/// Worst relative error of `c` over `instances` random inputs.
pub fn check_op(c: &OpCase, instances: u64) -> Result<f64, String> {
    let mut r = rng(0x6ad);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let inputs: Vec<Tensor> = c
            .inputs
            .iter()
            .map(|(s, how)| tensor(s, draw(&mut r, s.iter().product(), *how)))
            .collect();
        let (_, _, _, n) = contract(c, &inputs, None, false);
        let w = uniform(&mut r, n, -1.0, 1.0);
        let (mut tape, vars, loss, _) = contract(c, &inputs, Some(&w), true);
        tape.backward(loss).unwrap();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[i]).map_or_else(|| vec![0.0; input.numel()], <[f64]>::to_vec);
            let numeric = fd_grad(
                |x| {
                    let mut perturbed = inputs.clone();
                    perturbed[i] = tensor(input.shape(), x.to_vec());
                    let (t, _, l, _) = contract(c, &perturbed, Some(&w), false);
                    t.item(l)
                },
                input.data(),
                FD_STEP,
            );
            let err = max_rel_err(&analytic, &numeric);
            if !(err < FD_TOLERANCE) {
                return Err(format!("{}: instance {instance}, input {i}: relative error {err:e}", c.name));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// `round_ste` rounds half to even and passes the upstream gradient through
/// unchanged.
pub fn check_round_ste(instances: u64) -> Result<(), String> {
    let mut r = rng(7);
    for _ in 0..instances {
        let x = draw(&mut r, 9, P);
        let w = uniform(&mut r, 9, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(&Tensor::vector(x.clone()).unwrap().with_grad());
        let rounded = tape.round_ste(xv);
        if tape.value(rounded).iter().zip(&x).any(|(q, v)| *q != v.round_ties_even()) {
            return Err(format!("round_ste forward differs from ties-to-even on {x:?}"));
        }
        let wv = tape.constant(&Tensor::vector(w.clone()).unwrap());
        let prod = tape.mul(rounded, wv).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        if tape.grad(xv).unwrap() != &w[..] {
            return Err("round_ste backward is not the identity".into());
        }
    }
    Ok(())
}

pub fn random_block(r: &mut ChaCha8Rng, d1: usize, d2: usize, rank: usize, quantize: bool) -> BLoraLinear {
    BLoraLinear::from_parts(
        tensor(&[d1, d2], uniform(r, d1 * d2, -1.0, 1.0)),
        tensor(&[rank, d2], uniform(r, rank * d2, -1.0, 1.0)),
        tensor(&[d1, rank], uniform(r, d1 * rank, -1.0, 1.0)),
        tensor(&[rank], uniform(r, rank, 0.5, 1.5)),
        (rank > 1).then(|| uniform(r, rank - 1, 1.0, 4.0)),
        0.5,
        &QuantizerConfig::default(),
        quantize,
    )
    .unwrap()
}

fn block_loss(block: &BLoraLinear, x: &Tensor, w: &[f64], seed: u64) -> (Tape, blora::adapter::BlockVars, Var) {
    let mut b = block.clone();
    let mut tape = Tape::new();
    let vars = b.bind(&mut tape);
    let xv = tape.constant(x);
    let out = b
        .forward(&mut tape, &vars, xv, &QuantizerConfig::default(), Mode::Train, &mut rng(seed))
        .unwrap();
    let wv = tape.constant(&tensor(tape.shape(out), w.to_vec()));
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod);
    (tape, vars, loss)
}

type Pick = fn(&mut BLoraLinear) -> &mut Tensor;

/// Block without quantization: gradients of `A`, `B` and `E`.
pub fn check_block(instances: u64) -> Result<f64, String> {
    let mut r = rng(17);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let block = random_block(&mut r, 5, 4, 3, false);
        let x = tensor(&[2, 4], uniform(&mut r, 8, -2.0, 2.0));
        let w = uniform(&mut r, 10, -1.0, 1.0);
        let (mut tape, vars, loss) = block_loss(&block, &x, &w, 0);
        tape.backward(loss).unwrap();
        let params: [(&str, Var, Pick); 3] = [
            ("A", vars.a, |b| &mut b.a),
            ("B", vars.b, |b| &mut b.b),
            ("E", vars.e, |b| &mut b.e),
        ];
        for (name, var, pick) in params {
            let base = pick(&mut block.clone()).data().to_vec();
            let numeric = fd_grad(
                |p| {
                    let mut b = block.clone();
                    pick(&mut b).data_mut().copy_from_slice(p);
                    let (t, _, l) = block_loss(&b, &x, &w, 0);
                    t.item(l)
                },
                &base,
                FD_STEP,
            );
            let err = max_rel_err(tape.grad(var).unwrap(), &numeric);
            if !(err < FD_TOLERANCE) {
                return Err(format!("block instance {instance}, {name}: relative error {err:e}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Quantized block: gradient of the output site's gate logits, the only
/// ones not followed by another rounding step. The noise draw is fixed.
pub fn check_output_gates(instances: u64) -> Result<f64, String> {
    let mut r = rng(19);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let mut block = random_block(&mut r, 4, 4, 2, true);
        let phi: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        block.quantizers.out = block.quantizers.out.clone().with_phi(phi);
        let x = tensor(&[3, 4], uniform(&mut r, 12, -2.0, 2.0));
        let w = uniform(&mut r, 12, -1.0, 1.0);
        let seed = 100 + instance;
        let (mut tape, vars, loss) = block_loss(&block, &x, &w, seed);
        tape.backward(loss).unwrap();
        let numeric = fd_grad(
            |p| {
                let mut b = block.clone();
                b.quantizers.out.phi.data_mut().copy_from_slice(p);
                let (t, _, l) = block_loss(&b, &x, &w, seed);
                t.item(l)
            },
            &phi,
            FD_STEP,
        );
        let err = max_rel_err(tape.grad(vars.phi[6]).unwrap(), &numeric);
        if !(err < FD_TOLERANCE) {
            return Err(format!("output gates, instance {instance}: relative error {err:e}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Attention layer without quantization: adapter gradients of all three
/// projections.
pub fn check_attention(instances: u64) -> Result<f64, String> {
    let mut r = rng(31);
    let (d, heads, seq) = (4, 2, 3);
    let mut worst: f64 = 0.0;
    for instance in 0..instances {
        let blocks: Vec<BLoraLinear> = (0..3).map(|_| random_block(&mut r, d, d, 2, false)).collect();
        let wo = tensor(&[d, d], uniform(&mut r, d * d, -1.0, 1.0));
        let layer = AttentionLayer::new(blocks[0].clone(), blocks[1].clone(), blocks[2].clone(), wo, heads).unwrap();
        let x = tensor(&[2 * seq, d], uniform(&mut r, 2 * seq * d, -1.0, 1.0));
        let w = uniform(&mut r, 2 * seq * d, -1.0, 1.0);
        let loss = |layer: &AttentionLayer| {
            let mut l = layer.clone();
            let mut tape = Tape::new();
            let vars = l.bind(&mut tape);
            let xv = tape.constant(&x);
            let out = l
                .forward(&mut tape, &vars, xv, seq, &QuantizerConfig::default(), Mode::Train, &mut rng(0))
                .unwrap();
            let wv = tape.constant(&tensor(&[2 * seq, d], w.clone()));
            let prod = tape.mul(out, wv).unwrap();
            let s = tape.sum(prod);
            (tape, vars, s)
        };
        let (mut tape, vars, l) = loss(&layer);
        tape.backward(l).unwrap();
        let block_vars = [&vars.q, &vars.k, &vars.v];
        for site in 0..3 {
            for which in 0..3 {
                let var = [block_vars[site].a, block_vars[site].b, block_vars[site].e][which];
                let base = {
                    let b = layer.blocks()[site];
                    [&b.a, &b.b, &b.e][which].data().to_vec()
                };
                let numeric = fd_grad(
                    |p| {
                        let mut l2 = layer.clone();
                        let b = &mut *l2.blocks_mut()[site];
                        [&mut b.a, &mut b.b, &mut b.e][which].data_mut().copy_from_slice(p);
                        let (t, _, s) = loss(&l2);
                        t.item(s)
                    },
                    &base,
                    FD_STEP,
                );
                let err = max_rel_err(tape.grad(var).unwrap(), &numeric);
                if !(err < FD_TOLERANCE) {
                    return Err(format!("attention instance {instance}, site {site}, param {which}: {err:e}"));
                }
                worst = worst.max(err);
            }
        }
    }
    Ok(worst)
}
