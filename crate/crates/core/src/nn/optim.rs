/// Reduce-on-plateau learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub best: Option<f64>,
    pub epochs_since_improve: usize,
    pub patience: usize,
    pub factor: f64,
    /// Minimum decrease that counts as an improvement.
    pub threshold: f64,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self {
            best: None,
            epochs_since_improve: 0,
            patience: 3,
            factor: 0.5,
            threshold: 1e-6,
        }
    }
}

/// Adam with decoupled weight decay plus the plateau schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub plateau: PlateauSchedule,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new(0.001)
    }
}

impl OptimizerState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            plateau: PlateauSchedule::default(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// One Adam update over parallel lists of parameter tensors and their
    /// gradients. Tensors whose `trainable` flag is false are left untouched.
    pub fn adam_step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], trainable: &[bool]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), trainable.len());
        if self.first_moment.len() != params.len() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !trainable[i] {
                continue;
            }
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..p.len() {
                p[j] -= lr * self.weight_decay * p[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Records an epoch loss; halves the rate after `patience` epochs without
    /// improvement. Returns whether the rate was reduced.
    pub fn plateau_step(&mut self, epoch_loss: f64) -> bool {
        let s = &mut self.plateau;
        match s.best {
            Some(best) if epoch_loss < best - s.threshold => {
                s.best = Some(epoch_loss);
                s.epochs_since_improve = 0;
            }
            Some(best) => {
                s.best = Some(best.min(epoch_loss));
                s.epochs_since_improve += 1;
            }
            None => {
                s.best = Some(epoch_loss);
                s.epochs_since_improve = 0;
            }
        }
        if s.epochs_since_improve >= s.patience {
            s.epochs_since_improve = 0;
            self.learning_rate *= s.factor;
            return true;
        }
        false
    }
}
