//! Self-distillation: projector head, temperature softmax with teacher
//! centering, EMA teacher maintenance, and the two self-reinforcement losses.
//!
//! Distributions have `1 + N` rows: row 0 is the aggregated class token,
//! rows `1..=N` the patch tokens.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{FsrError, Result};
use crate::params::ParamStore;
use crate::tensor::{softmax_in_place, Matrix};

/// Row-stochastic `(1 + N) x K` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    pub probs: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorShape {
    pub input: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub out: usize,
}

impl ProjectorShape {
    pub fn init_params<R: Rng + ?Sized>(&self, store: &mut ParamStore, std: f64, rng: &mut R) {
        store.insert(
            "proj.l1.w",
            Matrix::trunc_normal(self.input, self.hidden, std, rng),
        );
        store.insert("proj.l1.b", Matrix::zeros(1, self.hidden));
        store.insert(
            "proj.l2.w",
            Matrix::trunc_normal(self.hidden, self.hidden, std, rng),
        );
        store.insert("proj.l2.b", Matrix::zeros(1, self.hidden));
        store.insert(
            "proj.l3.w",
            Matrix::trunc_normal(self.hidden, self.bottleneck, std, rng),
        );
        store.insert("proj.l3.b", Matrix::zeros(1, self.bottleneck));
        store.insert(
            "proj.last.v",
            Matrix::trunc_normal(self.bottleneck, self.out, std, rng),
        );
        store.insert("proj.last.g", Matrix::filled(1, self.out, 1.0));
    }

    /// MLP (GELU) → L2-normalized bottleneck → weight-normalized linear; `rows x K` logits.
    pub fn logits_graph(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mut h = tokens;
        for (i, layer) in ["proj.l1", "proj.l2", "proj.l3"].iter().enumerate() {
            let w = g.param(store, &format!("{layer}.w"))?;
            let b = g.param(store, &format!("{layer}.b"))?;
            h = g.linear(h, w, Some(b))?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        let h = g.l2_normalize_rows(h);
        let v = g.param(store, "proj.last.v")?;
        let gain = g.param(store, "proj.last.g")?;
        let w = g.weight_norm_cols(v, gain)?;
        g.matmul(h, w)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(FsrError::Config(format!(
            "temperature {tau} must be positive"
        )))
    }
}

/// `softmax((logits - center) / tau)` per row.
pub fn tempered_softmax(logits: &Matrix, tau: f64, center: Option<&[f64]>) -> Result<Distribution> {
    check_tau(tau)?;
    let mut probs = logits.clone();
    if let Some(c) = center {
        if c.len() != logits.cols() {
            return Err(FsrError::Shape(format!(
                "center of length {} for K = {}",
                c.len(),
                logits.cols()
            )));
        }
    }
    for i in 0..probs.rows() {
        let row = probs.row_mut(i);
        for (k, x) in row.iter_mut().enumerate() {
            let shift = center.map_or(0.0, |c| c[k]);
            *x = (*x - shift) / tau;
        }
        softmax_in_place(row);
    }
    Ok(Distribution { probs })
}

/// Projects tokens and normalizes them into a distribution. Returns the raw
/// projector logits too (the teacher's feed the center update).
pub fn project_and_normalize(
    tokens: &Matrix,
    shape: &ProjectorShape,
    store: &ParamStore,
    tau: f64,
    center: Option<&[f64]>,
) -> Result<(Distribution, Matrix)> {
    check_tau(tau)?;
    let mut g = Graph::new(false);
    let t = g.constant(tokens.clone());
    let logits = shape.logits_graph(&mut g, store, t)?;
    let logits = g.value(logits).clone();
    Ok((tempered_softmax(&logits, tau, center)?, logits))
}

/// Student log-probabilities `log_softmax(logits / tau)` as a graph node.
pub fn student_log_probs(g: &mut Graph, logits: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let scaled = g.scale(logits, 1.0 / tau);
    Ok(g.log_softmax(scaled))
}

/// `center ← m·center + (1 − m)·mean_rows(logits)`.
pub fn update_center(
    center: &[f64],
    teacher_logits: &[&Matrix],
    momentum: f64,
) -> Result<Vec<f64>> {
    let k = center.len();
    let mut sum = vec![0.0; k];
    let mut rows = 0usize;
    for m in teacher_logits {
        if m.cols() != k {
            return Err(FsrError::Shape(format!(
                "logits of width {} for a center of length {k}",
                m.cols()
            )));
        }
        for r in m.iter_rows() {
            for (s, x) in sum.iter_mut().zip(r) {
                *s += x;
            }
        }
        rows += m.rows();
    }
    if rows == 0 {
        return Ok(center.to_vec());
    }
    Ok(center
        .iter()
        .zip(&sum)
        .map(|(c, s)| momentum * c + (1.0 - momentum) * s / rows as f64)
        .collect())
}

/// Gradient-free copy of the encoder, aggregation module, and projector.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherState {
    pub params: ParamStore,
    pub center: Vec<f64>,
    pub encoder_momentum: f64,
    pub proj_momentum: f64,
    pub center_momentum: f64,
}

/// Parameter prefixes mirrored by the teacher.
pub const TEACHER_PREFIXES: [&str; 3] = ["enc.", "agg.", "proj."];

pub fn is_teacher_param(name: &str) -> bool {
    TEACHER_PREFIXES.iter().any(|p| name.starts_with(p))
}

impl TeacherState {
    pub fn from_student(
        student: &ParamStore,
        k: usize,
        encoder_momentum: f64,
        proj_momentum: f64,
        center_momentum: f64,
    ) -> Self {
        let mut params = ParamStore::new();
        for (name, v) in student.iter().filter(|(n, _)| is_teacher_param(n)) {
            params.insert(name, v.clone());
        }
        Self {
            params,
            center: vec![0.0; k],
            encoder_momentum,
            proj_momentum,
            center_momentum,
        }
    }

    /// Momentum applied to a given parameter: the encoder's for `enc.*`, the
    /// head momentum for the aggregation module and projector.
    pub fn momentum_for(&self, name: &str) -> f64 {
        if name.starts_with("enc.") {
            self.encoder_momentum
        } else {
            self.proj_momentum
        }
    }
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` for one tensor.
pub fn ema_tensor(teacher: &mut Matrix, student: &Matrix, m: f64) {
    for (t, s) in teacher.as_mut_slice().iter_mut().zip(student.as_slice()) {
        *t = m * *t + (1.0 - m) * s;
    }
}

/// Updates every teacher tensor from the student with its own momentum.
/// `proj_momentum` replaces the head momentum for this update (it follows a
/// schedule); the encoder momentum stays as configured.
pub fn ema_update(
    teacher: &mut TeacherState,
    student: &ParamStore,
    proj_momentum: f64,
) -> Result<()> {
    teacher.proj_momentum = proj_momentum;
    let momenta: Vec<f64> = teacher
        .params
        .names()
        .map(|n| teacher.momentum_for(n))
        .collect();
    for ((name, t), m) in teacher.params.iter_mut().zip(momenta) {
        let s = student.require(name)?;
        if s.shape() != t.shape() {
            return Err(FsrError::Shape(format!(
                "teacher/student shapes differ for {name}"
            )));
        }
        ema_tensor(t, s, m);
    }
    Ok(())
}

/// Graph form of the uncertain-token loss:
/// `−Σ_i M_b[i] · Σ_k P₂[1+i, k] · log P̂₂[1+i, k]`.
pub fn loss_uncertain_graph(
    g: &mut Graph,
    student_log_probs: Var,
    teacher: &Distribution,
    masked: &[bool],
) -> Result<Var> {
    let (rows, k) = g.shape(student_log_probs);
    if teacher.probs.shape() != (rows, k) || masked.len() + 1 != rows {
        return Err(FsrError::Shape(format!(
            "student {rows}x{k}, teacher {:?}, mask {}",
            teacher.probs.shape(),
            masked.len()
        )));
    }
    let mut weights = Matrix::zeros(rows, k);
    for (i, &m) in masked.iter().enumerate() {
        if m {
            weights
                .row_mut(i + 1)
                .copy_from_slice(teacher.probs.row(i + 1));
        }
    }
    let prod = g.mul_const(student_log_probs, weights)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0))
}

/// Graph form of the class-token loss `−Σ_k P₁[0, k] · log P̂₂[0, k]`.
pub fn loss_certain_graph(
    g: &mut Graph,
    student_log_probs: Var,
    teacher_other_view: &Distribution,
) -> Result<Var> {
    let (rows, k) = g.shape(student_log_probs);
    if teacher_other_view.probs.cols() != k || teacher_other_view.probs.rows() == 0 {
        return Err(FsrError::Shape(
            "teacher class distribution width differs from student".into(),
        ));
    }
    let mut weights = Matrix::zeros(rows, k);
    weights
        .row_mut(0)
        .copy_from_slice(teacher_other_view.probs.row(0));
    let prod = g.mul_const(student_log_probs, weights)?;
    let s = g.sum_all(prod);
    Ok(g.scale(s, -1.0))
}

fn row_cross_entropy(target: &[f64], pred: &[f64]) -> f64 {
    -target
        .iter()
        .zip(pred)
        .map(|(t, p)| if *t == 0.0 { 0.0 } else { t * p.ln() })
        .sum::<f64>()
}

/// Value form of the uncertain-token loss over probability matrices.
pub fn loss_uncertain(
    student: &Distribution,
    teacher: &Distribution,
    masked: &[bool],
) -> Result<f64> {
    if student.probs.shape() != teacher.probs.shape() || masked.len() + 1 != student.probs.rows() {
        return Err(FsrError::Shape(
            "distribution or mask sizes disagree".into(),
        ));
    }
    Ok(masked
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| row_cross_entropy(teacher.probs.row(i + 1), student.probs.row(i + 1)))
        .sum())
}

/// Value form of the class-token loss.
pub fn loss_certain(teacher_other_view: &Distribution, student: &Distribution) -> Result<f64> {
    if teacher_other_view.probs.cols() != student.probs.cols() {
        return Err(FsrError::Shape("distribution widths disagree".into()));
    }
    Ok(row_cross_entropy(
        teacher_other_view.probs.row(0),
        student.probs.row(0),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(rows: &[Vec<f64>]) -> Distribution {
        Distribution {
            probs: Matrix::from_rows(rows).unwrap(),
        }
    }

    #[test]
    fn uniform_and_sharp_softmax() {
        let d = tempered_softmax(&Matrix::filled(1, 8, 0.3), 0.1, None).unwrap();
        assert!(d
            .probs
            .as_slice()
            .iter()
            .all(|&p| (p - 0.125).abs() < 1e-15));
        let d = tempered_softmax(&Matrix::row_vector(vec![1.0, 0.0]), 0.1, None).unwrap();
        let want = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((d.probs[(0, 0)] - want).abs() < 1e-12);
        assert!((d.probs[(0, 0)] - 0.9999546).abs() < 1e-7);
        assert!((d.probs[(0, 1)] - 0.0000454).abs() < 1e-7);
    }

    #[test]
    fn centering_by_a_constant_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Matrix::uniform(3, 5, -2.0, 2.0, &mut rng);
        let a = tempered_softmax(&logits, 0.04, None).unwrap();
        let b = tempered_softmax(&logits, 0.04, Some(&[0.7; 5])).unwrap();
        assert!(a.probs.max_abs_diff(&b.probs) < 1e-12);
    }

    #[test]
    fn nonpositive_temperature_is_rejected() {
        assert!(tempered_softmax(&Matrix::zeros(1, 2), 0.0, None).is_err());
        assert!(tempered_softmax(&Matrix::zeros(1, 2), -1.0, None).is_err());
    }

    #[test]
    fn center_update_formula() {
        let batch = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(update_center(&[5.0], &[&batch], 1.0).unwrap(), vec![5.0]);
        assert_eq!(update_center(&[5.0], &[&batch], 0.0).unwrap(), vec![2.0]);
        let c = update_center(&[0.0], &[&batch], 0.9).unwrap();
        assert!((c[0] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ema_scalar_cases() {
        let mut t = Matrix::filled(1, 1, 1.0);
        ema_tensor(&mut t, &Matrix::zeros(1, 1), 0.996);
        assert_eq!(t[(0, 0)], 0.996);
        let mut t = Matrix::filled(1, 1, 1.0);
        ema_tensor(&mut t, &Matrix::filled(1, 1, 3.0), 0.0);
        assert_eq!(t[(0, 0)], 3.0);
        let mut t = Matrix::filled(1, 1, 1.0);
        ema_tensor(&mut t, &Matrix::filled(1, 1, 3.0), 1.0);
        assert_eq!(t[(0, 0)], 1.0);
    }

    #[test]
    fn uncertain_loss_cases() {
        let student = dist(&[vec![0.5, 0.5], vec![0.25, 0.75], vec![0.9, 0.1]]);
        let teacher = dist(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(
            loss_uncertain(&student, &teacher, &[false, false]).unwrap(),
            0.0
        );
        let l = loss_uncertain(&student, &teacher, &[true, false]).unwrap();
        assert!((l - -(0.25f64).ln()).abs() < 1e-15);
        let l = loss_uncertain(&student, &student, &[true, true]).unwrap();
        let h = |p: &[f64]| -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((l - h(&[0.25, 0.75]) - h(&[0.9, 0.1])).abs() < 1e-12);
    }

    #[test]
    fn certain_loss_cases() {
        let uniform = dist(&[vec![0.125; 8]]);
        let mut onehot = vec![0.0; 8];
        onehot[3] = 1.0;
        let l = loss_certain(&dist(&[onehot]), &uniform).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
        assert!((l - 2.0794).abs() < 1e-4);
        let l = loss_certain(&dist(&[vec![0.7, 0.3]]), &dist(&[vec![0.5, 0.5]])).unwrap();
        // 0.7·ln 2 + 0.3·ln 2.
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let p = dist(&[vec![0.2, 0.8]]);
        let l = loss_certain(&p, &p).unwrap();
        assert!((l - -(0.2 * 0.2f64.ln() + 0.8 * 0.8f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_value_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Matrix::uniform(4, 5, -1.0, 1.0, &mut rng);
        let teacher =
            tempered_softmax(&Matrix::uniform(4, 5, -1.0, 1.0, &mut rng), 0.04, None).unwrap();
        let student = tempered_softmax(&logits, 0.1, None).unwrap();
        let mask = [true, false, true];
        let mut g = Graph::new(true);
        let x = g.leaf(logits, true);
        let lp = student_log_probs(&mut g, x, 0.1).unwrap();
        let lu = loss_uncertain_graph(&mut g, lp, &teacher, &mask).unwrap();
        let lc = loss_certain_graph(&mut g, lp, &teacher).unwrap();
        assert!((g.scalar(lu) - loss_uncertain(&student, &teacher, &mask).unwrap()).abs() < 1e-12);
        assert!((g.scalar(lc) - loss_certain(&teacher, &student).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn projector_rows_are_distributions_and_sharpen() {
        let shape = ProjectorShape {
            input: 6,
            hidden: 12,
            bottleneck: 4,
            out: 7,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..50 {
            let mut store = ParamStore::new();
            shape.init_params(&mut store, 0.5, &mut rng);
            let tokens = Matrix::uniform(5, 6, -2.0, 2.0, &mut rng);
            let (d, logits) = project_and_normalize(&tokens, &shape, &store, 0.1, None).unwrap();
            let (sharp, _) = project_and_normalize(&tokens, &shape, &store, 0.04, None).unwrap();
            for i in 0..5 {
                let s: f64 = d.probs.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "trial {trial}");
                assert!(d.probs.row(i).iter().all(|&p| p > 0.0 && p < 1.0));
                let row = logits.row(i);
                let uniform = row.iter().all(|&x| x == row[0]);
                if !uniform {
                    let max = |r: &[f64]| r.iter().copied().fold(0.0, f64::max);
                    assert!(max(sharp.probs.row(i)) > max(d.probs.row(i)));
                }
            }
        }
    }

    #[test]
    fn teacher_mirrors_only_shared_modules() {
        let mut student = ParamStore::new();
        student.insert("enc.pos", Matrix::filled(2, 2, 1.0));
        student.insert("agg.cls_token", Matrix::filled(1, 2, 1.0));
        student.insert("proj.l1.w", Matrix::filled(2, 2, 1.0));
        student.insert("dec.out.w", Matrix::filled(2, 2, 1.0));
        student.insert("cls.w", Matrix::filled(2, 2, 1.0));
        let mut teacher = TeacherState::from_student(&student, 4, 0.0, 0.996, 0.9);
        assert_eq!(
            teacher.params.names().collect::<Vec<_>>(),
            vec!["enc.pos", "agg.cls_token", "proj.l1.w"]
        );
        for (_, v) in student.iter_mut() {
            v.as_mut_slice().iter_mut().for_each(|x| *x = 0.0);
        }
        ema_update(&mut teacher, &student, 0.996).unwrap();
        assert_eq!(teacher.params.get("enc.pos").unwrap()[(0, 0)], 0.0);
        assert_eq!(teacher.params.get("agg.cls_token").unwrap()[(0, 0)], 0.996);
        assert_eq!(teacher.params.get("proj.l1.w").unwrap()[(0, 0)], 0.996);
    }
}
