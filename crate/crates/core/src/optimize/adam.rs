use ndarray::{Array2, Zip};

/// Adam with bias correction, operating in place on one tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Array2<f64>,
    v: Array2<f64>,
    step: i32,
}

impl Adam {
    pub fn new(lr: f64, shape: (usize, usize)) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }

    pub fn step(&mut self, param: &mut Array2<f64>, grad: &Array2<f64>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let g = Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap();
        Adam::new(0.1, (1, 2)).step(&mut p, &g);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((p[(0, 1)] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Array2::from_elem((2, 2), 3.0);
        let mut opt = Adam::new(0.05, (2, 2));
        for _ in 0..500 {
            let g = p.mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-2));
    }
}
