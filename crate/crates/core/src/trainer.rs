//! Online SGD of a student on a teacher-generated stream.
//!
//! Rates follow the thermodynamic scaling: the first layer moves with
//! `eta / sqrt(N)` times `e v_k g'(lambda_k) x` and the second layer with
//! `eta / N` times `e g(lambda_k)`, so order parameters change by O(1/N) per
//! sample and training time is naturally measured in `steps / N`.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{assign_groups, ge_closed_form, order_params};
use crate::error::{check_dim, Error, Result};
use crate::netcore::{
    activation, activation_deriv, fill_standard_normal, forward, InputSample, NoiseConfig,
    TwoLayerNet,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub sigma: f64,
    pub seed: u64,
    pub ge_log_interval: usize,
    /// Stop once the logged closed-form error falls below
    /// [`convergence_threshold`].
    pub stop_at_threshold: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            steps: 800_000,
            sigma: 0.0,
            seed: 0,
            ge_log_interval: 20_000,
            stop_at_threshold: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta must be > 0, got {}", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.ge_log_interval == 0 {
            return Err(Error::InvalidArgument("ge_log_interval must be >= 1".into()));
        }
        NoiseConfig::new(self.sigma).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeLogEntry {
    pub step: usize,
    pub ge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainTrace {
    #[serde(skip)]
    pub final_student: TwoLayerNet,
    pub ge_log: Vec<GeLogEntry>,
    pub converged: bool,
    pub seed: u64,
    pub steps_run: usize,
    pub convergence_threshold: f64,
}

impl TrainTrace {
    pub fn final_ge(&self) -> f64 {
        self.ge_log.last().map_or(f64::NAN, |e| e.ge)
    }
}

/// Early-stopping level `1e-3 * sum_m (v*_m)^2`, i.e. `1e-3 M (v*)^2` for a
/// uniform teacher.
pub fn convergence_threshold(teacher: &TwoLayerNet) -> f64 {
    1e-3 * teacher.v().iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of `1/2 (phi(x) - y)^2` with respect to `(w, v)`.
pub fn loss_gradient(net: &TwoLayerNet, sample: &InputSample) -> Result<(Array2<f64>, Array1<f64>)> {
    let fields = net.local_fields(sample.x.view())?;
    let inv_sqrt_n = 1.0 / (net.input_dim() as f64).sqrt();
    let err = forward(net, sample.x.view())? - sample.y;
    let mut gw = Array2::zeros(net.w().raw_dim());
    for (k, mut row) in gw.outer_iter_mut().enumerate() {
        let coef = err * net.v()[k] * activation_deriv(fields[k]) * inv_sqrt_n;
        row.assign(&(&sample.x * coef));
    }
    let gv = fields.mapv(|l| err * activation(l));
    Ok((gw, gv))
}

/// Half squared error on one sample.
pub fn sample_loss(net: &TwoLayerNet, sample: &InputSample) -> Result<f64> {
    let e = forward(net, sample.x.view())? - sample.y;
    Ok(0.5 * e * e)
}

/// One online step; returns the updated network and leaves `student` as is.
pub fn sgd_step(student: &TwoLayerNet, sample: &InputSample, eta: f64) -> Result<TwoLayerNet> {
    if !(eta > 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be > 0, got {eta}")));
    }
    check_dim("input length", student.input_dim(), sample.x.len())?;
    let mut next = student.clone();
    let mut fields = Array1::zeros(student.hidden_count());
    sgd_step_in_place(&mut next, sample.x.view(), sample.y, eta, &mut fields);
    Ok(next)
}

/// Simultaneous update of both layers from pre-step parameters. `fields` is
/// scratch space of length K. Dimensions are the caller's responsibility.
fn sgd_step_in_place(
    net: &mut TwoLayerNet,
    x: ArrayView1<f64>,
    y: f64,
    eta: f64,
    fields: &mut Array1<f64>,
) {
    let n = net.input_dim() as f64;
    let inv_sqrt_n = 1.0 / n.sqrt();
    let (w, v) = net.parts_mut();
    ndarray::linalg::general_mat_vec_mul(inv_sqrt_n, w, &x, 0.0, fields);
    let mut out = 0.0;
    for (l, vk) in fields.iter().zip(v.iter()) {
        out += vk * activation(*l);
    }
    let err = out - y;
    if err == 0.0 {
        return;
    }
    let w_rate = eta * inv_sqrt_n;
    let v_rate = eta / n;
    for (k, mut row) in w.outer_iter_mut().enumerate() {
        let lambda = fields[k];
        let coef = w_rate * err * v[k] * activation_deriv(lambda);
        Zip::from(&mut row).and(&x).for_each(|wi, &xi| *wi -= coef * xi);
        v[k] -= v_rate * err * activation(lambda);
    }
}

/// Runs online SGD from `student_init` on labels from `teacher`.
///
/// The closed-form error is logged every `ge_log_interval` steps (and at
/// step 0 and the final step). `converged` means the final student passes
/// the specialization check: with `K = Z M`, every teacher node is the
/// best-aligned teacher of exactly `Z` students.
pub fn train(teacher: &TwoLayerNet, student_init: &TwoLayerNet, cfg: &TrainConfig) -> Result<TrainTrace> {
    cfg.validate()?;
    check_dim("student input dimension", teacher.input_dim(), student_init.input_dim())?;
    let noise = NoiseConfig::new(cfg.sigma)?;
    let n = teacher.input_dim();
    let threshold = convergence_threshold(teacher);
    let mut rng = rng::stream(cfg.seed);
    let mut student = student_init.clone();
    let mut x = Array1::<f64>::zeros(n);
    let mut fields = Array1::zeros(student.hidden_count());
    let mut teacher_fields = Array1::zeros(teacher.hidden_count());
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();

    let closed = |s: &TwoLayerNet| -> Result<f64> {
        let op = order_params(s, teacher)?;
        Ok(ge_closed_form(&op, s.v().view(), teacher.v().view())?.max(0.0))
    };
    let mut ge_log = vec![GeLogEntry { step: 0, ge: closed(&student)? }];
    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        fill_standard_normal(x.as_slice_mut().expect("contiguous"), &mut rng);
        ndarray::linalg::general_mat_vec_mul(inv_sqrt_n, teacher.w(), &x, 0.0, &mut teacher_fields);
        let mut y: f64 = teacher_fields
            .iter()
            .zip(teacher.v().iter())
            .map(|(&l, &v)| v * activation(l))
            .sum();
        if noise.sigma > 0.0 {
            let zeta: f64 = rng.sample(rand_distr::StandardNormal);
            y += noise.sigma * zeta;
        }
        sgd_step_in_place(&mut student, x.view(), y, cfg.eta, &mut fields);
        steps_run = step;
        if step % cfg.ge_log_interval == 0 || step == cfg.steps {
            let ge = closed(&student)?;
            ge_log.push(GeLogEntry { step, ge });
            if cfg.stop_at_threshold && ge <= threshold {
                break;
            }
        }
    }
    if !student.w().iter().chain(student.v().iter()).all(|p| p.is_finite()) {
        return Err(Error::Experiment(format!(
            "training diverged (eta = {}, seed = {})",
            cfg.eta, cfg.seed
        )));
    }
    let converged = is_specialized(&student, teacher)?;
    Ok(TrainTrace {
        final_student: student,
        ge_log,
        converged,
        seed: cfg.seed,
        steps_run,
        convergence_threshold: threshold,
    })
}

/// Specialization check on a trained pair. For `K` not divisible by `M`
/// it only requires every teacher node to be learned by someone.
pub fn is_specialized(student: &TwoLayerNet, teacher: &TwoLayerNet) -> Result<bool> {
    let groups = assign_groups(&order_params(student, teacher)?);
    let (k, m) = (student.hidden_count(), teacher.hidden_count());
    Ok(if k % m == 0 {
        groups.is_specialized(k / m)
    } else {
        groups.explained() == m
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{draw_sample, teacher_label};
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn zero_error_leaves_parameters() {
        let mut rng = stream(1);
        let net = TwoLayerNet::random(3, 10, &mut rng);
        let x = crate::netcore::sample_input(10, &mut rng);
        let y = forward(&net, x.view()).unwrap();
        let next = sgd_step(&net, &InputSample { x, y }, 0.5).unwrap();
        assert_eq!(next, net);
    }

    #[test]
    fn single_unit_hand_gradient() {
        // N = 4, K = 1: w = (1, 0, 2, 0), v = 0.5, x = (1, 1, 1, -1), y = 0.3.
        let net = TwoLayerNet::new(array![[1.0, 0.0, 2.0, 0.0]], array![0.5]).unwrap();
        let x = array![1.0, 1.0, 1.0, -1.0];
        let y = 0.3;
        let eta = 0.5;
        let lambda = 3.0 / 2.0;
        let e = 0.5 * activation(lambda) - y;
        let gprime = (2.0 / std::f64::consts::PI).sqrt() * (-lambda * lambda / 2.0f64).exp();
        let dw = eta / 2.0 * e * 0.5 * gprime;
        let dv = eta / 4.0 * e * activation(lambda);
        let next = sgd_step(&net, &InputSample { x: x.clone(), y }, eta).unwrap();
        let expected_w = array![1.0 - dw, -dw, 2.0 - dw, dw];
        for j in 0..4 {
            assert!((next.w()[[0, j]] - expected_w[j]).abs() < 1e-10);
        }
        assert!((next.v()[0] - (0.5 - dv)).abs() < 1e-10);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = stream(42);
        let teacher = TwoLayerNet::teacher(2, 10, 1.5, &mut rng);
        let net = TwoLayerNet::random(3, 10, &mut rng);
        let sample = draw_sample(&teacher, NoiseConfig::noiseless(), &mut rng);
        let (gw, gv) = loss_gradient(&net, &sample).unwrap();
        let h = 1e-5;
        for k in 0..3 {
            for j in 0..10 {
                let mut wp = net.w().clone();
                let mut wm = net.w().clone();
                wp[[k, j]] += h;
                wm[[k, j]] -= h;
                let lp = sample_loss(&TwoLayerNet::new(wp, net.v().clone()).unwrap(), &sample).unwrap();
                let lm = sample_loss(&TwoLayerNet::new(wm, net.v().clone()).unwrap(), &sample).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - gw[[k, j]]).abs() <= 1e-6 * gw[[k, j]].abs().max(1e-3), "w[{k},{j}]");
            }
            let mut vp = net.v().clone();
            let mut vm = net.v().clone();
            vp[k] += h;
            vm[k] -= h;
            let lp = sample_loss(&net.with_v(vp).unwrap(), &sample).unwrap();
            let lm = sample_loss(&net.with_v(vm).unwrap(), &sample).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gv[k]).abs() <= 1e-6 * gv[k].abs().max(1e-3), "v[{k}]");
        }
    }

    #[test]
    fn step_applies_scaled_gradient() {
        let mut rng = stream(6);
        let teacher = TwoLayerNet::teacher(1, 16, 2.0, &mut rng);
        let net = TwoLayerNet::random(2, 16, &mut rng);
        let sample = draw_sample(&teacher, NoiseConfig::noiseless(), &mut rng);
        let (gw, gv) = loss_gradient(&net, &sample).unwrap();
        let eta = 0.3;
        let next = sgd_step(&net, &sample, eta).unwrap();
        // w moves by eta times the gradient (the 1/sqrt(N) lives in the gradient),
        // v by eta / N times the gradient.
        let dw = net.w() - next.w();
        let dv = net.v() - next.v();
        assert!((&dw - &(&gw * eta)).iter().all(|d| d.abs() < 1e-12));
        assert!((&dv - &(&gv * (eta / 16.0))).iter().all(|d| d.abs() < 1e-12));
        assert!(sgd_step(&net, &sample, 0.0).is_err());
    }

    #[test]
    fn perfect_student_stays_put() {
        let mut rng = stream(3);
        let teacher = TwoLayerNet::teacher(2, 50, 4.0, &mut rng);
        let cfg = TrainConfig { steps: 2_000, ge_log_interval: 500, stop_at_threshold: false, ..Default::default() };
        let trace = train(&teacher, &teacher, &cfg).unwrap();
        assert_eq!(trace.final_student, teacher);
        assert!(trace.ge_log.iter().all(|e| e.ge <= 1e-20));
        assert!(trace.converged);
        let steps: Vec<usize> = trace.ge_log.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 500, 1000, 1500, 2000]);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = stream(12);
        let teacher = TwoLayerNet::teacher(2, 40, 2.0, &mut rng);
        let init = TwoLayerNet::random(4, 40, &mut rng);
        let cfg = TrainConfig { steps: 5_000, ge_log_interval: 1_000, seed: 9, ..Default::default() };
        let a = train(&teacher, &init, &cfg).unwrap();
        let b = train(&teacher, &init, &cfg).unwrap();
        assert_eq!(a.final_student, b.final_student);
        assert_eq!(a.ge_log, b.ge_log);
        let c = train(&teacher, &init, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.final_student, c.final_student);
    }

    #[test]
    fn training_matches_explicit_step_loop() {
        // `train` fuses sampling, labelling and the update; check it against
        // the public building blocks.
        let mut rng = stream(13);
        let teacher = TwoLayerNet::teacher(2, 20, 2.0, &mut rng);
        let init = TwoLayerNet::random(2, 20, &mut rng);
        let cfg = TrainConfig { steps: 300, ge_log_interval: 300, sigma: 0.1, seed: 4, ..Default::default() };
        let trace = train(&teacher, &init, &cfg).unwrap();
        let mut stream_ = stream(4);
        let mut net = init.clone();
        let noise = NoiseConfig::new(0.1).unwrap();
        for _ in 0..300 {
            let x = crate::netcore::sample_input(20, &mut stream_);
            let y = teacher_label(&teacher, x.view(), noise, &mut stream_).unwrap();
            net = sgd_step(&net, &InputSample { x, y }, cfg.eta).unwrap();
        }
        let diff = (net.w() - trace.final_student.w()).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn small_problem_learns() {
        let mut rng = stream(100);
        let teacher = TwoLayerNet::teacher(1, 50, 2.0, &mut rng);
        let init = TwoLayerNet::random(2, 50, &mut rng);
        let cfg = TrainConfig { steps: 60_000, ge_log_interval: 5_000, seed: 1, ..Default::default() };
        let trace = train(&teacher, &init, &cfg).unwrap();
        assert!(trace.final_ge() < 0.1 * trace.ge_log[0].ge.max(0.05), "{:?}", trace.ge_log);
    }

    #[test]
    fn trace_json_keys() {
        let mut rng = stream(1);
        let teacher = TwoLayerNet::teacher(1, 8, 1.0, &mut rng);
        let cfg = TrainConfig { steps: 10, ge_log_interval: 5, ..Default::default() };
        let trace = train(&teacher, &teacher, &cfg).unwrap();
        let v: serde_json::Value = serde_json::to_value(&trace).unwrap();
        assert!(v.get("seed").is_some() && v.get("converged").is_some());
        assert!(v["ge_log"][0].get("step").is_some() && v["ge_log"][0].get("ge").is_some());
    }

    #[test]
    fn config_validation() {
        let t = TwoLayerNet::teacher(1, 4, 1.0, &mut stream(0));
        for cfg in [
            TrainConfig { eta: 0.0, ..Default::default() },
            TrainConfig { steps: 0, ..Default::default() },
            TrainConfig { sigma: -1.0, ..Default::default() },
        ] {
            assert!(train(&t, &t, &cfg).is_err());
        }
        let other = TwoLayerNet::random(1, 5, &mut stream(0));
        assert!(train(&t, &other, &TrainConfig::default()).is_err());
    }
}
