use dropnas::autodiff::{Conv2dSpec, Tape, Var};
use dropnas::rng::{stream, Purpose};
use dropnas::{Result, Tensor};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (input, element, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is near zero are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

fn contract(out: &Tensor, proj: &[f64]) -> f64 {
    out.data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

fn run<F>(f: &F, inputs: &[Tensor], tracked: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| {
            if tracked {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok((tape, vars, out))
}

/// Compares the tape gradient of `<f(inputs), R>` (R a fixed random
/// projection) with central differences for every input element.
///
/// Relative error is `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn gradcheck<F, R>(f: F, inputs: &[Tensor], eps: f64, rng: &mut R) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let (mut tape, vars, out) = run(&f, inputs, true)?;
    let numel = tape.value(out).numel();
    let proj: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(tape.shape(out).to_vec(), proj.clone())?)?;
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradcheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    let mut shifted = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            shifted[i].data_mut()[j] = orig + eps;
            let (t, _, o) = run(&f, &shifted, false)?;
            let plus = contract(t.value(o), &proj);
            shifted[i].data_mut()[j] = orig - eps;
            let (t, _, o) = run(&f, &shifted, false)?;
            let minus = contract(t.value(o), &proj);
            shifted[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if !(err <= report.max_rel_err) {
                report.max_rel_err = err;
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync>;

/// One differentiable tape op (or a short composition) with input shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f: Box::new(f),
    }
}

/// Every differentiable op of the tape, with the conv variants the supernet uses.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1])),
        case("mul", &[&[4, 3], &[4, 3]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| t.scale(v[0], -1.7)),
        case("sum", &[&[2, 2, 3]], |t, v| t.sum(v[0])),
        case("relu", &[&[3, 7]], |t, v| t.relu(v[0])),
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        case("conv2d", &[&[1, 2, 4, 4], &[3, 2, 3, 3]], |t, v| {
            t.conv2d(v[0], v[1], Conv2dSpec::plain())
        }),
        case("conv2d_stride2", &[&[2, 2, 5, 5], &[2, 2, 3, 3]], |t, v| {
            t.conv2d(v[0], v[1], Conv2dSpec::new(2, 1, 1))
        }),
        case(
            "conv2d_dilated_depthwise",
            &[&[2, 3, 6, 6], &[3, 1, 3, 3]],
            |t, v| t.conv2d(v[0], v[1], Conv2dSpec::new(1, 2, 3)),
        ),
        case(
            "conv2d_pointwise",
            &[&[2, 3, 3, 3], &[4, 3, 1, 1]],
            |t, v| t.conv2d(v[0], v[1], Conv2dSpec::plain()),
        ),
        case("max_pool3x3", &[&[2, 2, 4, 4]], |t, v| {
            t.max_pool3x3(v[0], 1)
        }),
        case("max_pool3x3_stride2", &[&[1, 2, 5, 5]], |t, v| {
            t.max_pool3x3(v[0], 2)
        }),
        case("avg_pool3x3", &[&[2, 2, 4, 4]], |t, v| {
            t.avg_pool3x3(v[0], 1)
        }),
        case("avg_pool3x3_stride2", &[&[1, 2, 5, 5]], |t, v| {
            t.avg_pool3x3(v[0], 2)
        }),
        case("batch_norm", &[&[3, 2, 3, 3]], |t, v| {
            t.batch_norm(v[0], None)
        }),
        case("batch_norm_affine", &[&[3, 2, 2, 3], &[2], &[2]], |t, v| {
            t.batch_norm(v[0], Some((v[1], v[2])))
        }),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0])),
        case("softmax_row", &[&[3, 4]], |t, v| {
            t.softmax_row(v[0], 1, &[true; 4])
        }),
        case("cross_entropy", &[&[4, 3]], |t, v| {
            t.cross_entropy(v[0], &[0, 2, 1, 2])
        }),
        case("weighted_sum", &[&[4], &[2, 3], &[2, 3]], |t, v| {
            t.weighted_sum(v[0], &[(1, v[1]), (3, v[2])])
        }),
        case(
            "concat_channels",
            &[&[2, 1, 2, 2], &[2, 3, 2, 2]],
            |t, v| t.concat_channels(&[v[0], v[1]]),
        ),
        case("global_avg_pool", &[&[2, 3, 3, 2]], |t, v| {
            t.global_avg_pool(v[0])
        }),
    ]
}

/// Worst relative error of `case` over `trials` fresh uniform(-1, 1) inputs.
pub fn gradcheck_case(case: &OpCase, trials: u64, eps: f64, key: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = stream(key, Purpose::Init, trial, 0);
        let inputs = case
            .shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Tensor::new(
                    s.clone(),
                    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let report = gradcheck(&case.f, &inputs, eps, &mut rng)?;
        if !(report.max_rel_err <= worst) {
            worst = report.max_rel_err;
        }
    }
    Ok(worst)
}
