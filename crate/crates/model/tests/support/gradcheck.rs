// Central finite differences on every parameter, compared with the
// autodiff gradient of the total loss. The numeric side only perturbs
// parameter values and re-runs the eval-mode forward pass.

use candle_core::{DType, Device, Tensor};
use dnilm_model::loss::total_loss;
use dnilm_model::nn::Ctx;
use dnilm_model::Network;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;
// Below this the gradient is numerically zero and only the absolute gap counts.
pub const ABS_FLOOR: f64 = 1e-8;

pub struct Batch {
    pub x: Tensor,
    pub labels: Tensor,
    pub targets: Tensor,
}

pub fn random_batch(b: usize, t: usize, k: usize, seed: u64) -> Batch {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(b * t * 2);
    for _ in 0..b * t {
        x.push(rng.gen_range(-300.0..2500.0));
        x.push(rng.gen_range(-100.0..400.0));
    }
    let labels: Vec<f64> = (0..b * k).map(|i| ((i + seed as usize) % 2) as f64).collect();
    let targets: Vec<f64> = (0..b * t).map(|_| rng.gen_range(0.0..1.0)).collect();
    let dev = Device::Cpu;
    Batch {
        x: Tensor::from_vec(x, (b, t, 2), &dev).unwrap(),
        labels: Tensor::from_vec(labels, (b, k), &dev).unwrap(),
        targets: Tensor::from_vec(targets, (b, t), &dev).unwrap(),
    }
}

fn loss_tensor(net: &dyn Network, batch: &Batch) -> Tensor {
    let heads = net.forward_t(&batch.x, &mut Ctx::eval()).unwrap();
    let parts = total_loss(
        heads.states.as_ref(),
        heads.injection.as_ref(),
        &batch.labels,
        &batch.targets,
        &net.loss_config(),
    )
    .unwrap();
    parts.total
}

fn loss_value(net: &dyn Network, batch: &Batch) -> f64 {
    loss_tensor(net, batch).to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[derive(Debug, Clone)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

pub struct Report {
    pub checked: usize,
    pub failures: Vec<Worst>,
    pub worst: Option<Worst>,
}

impl Report {
    pub fn worst_rel(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel)
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

pub fn check(net: &dyn Network, batch: &Batch) -> Report {
    assert_eq!(net.params().dtype(), DType::F64, "gradient checks need 64-bit parameters");
    let grads = loss_tensor(net, batch).backward().unwrap();
    let mut report = Report {
        checked: 0,
        failures: Vec::new(),
        worst: None,
    };
    let names: Vec<String> = net.params().iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let var = net.params().get(&name).unwrap().clone();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let base = net.params().values(&name).unwrap();
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + STEP;
            net.params().set_values(&name, &probe).unwrap();
            let up = loss_value(net, batch);
            probe[i] = base[i] - STEP;
            net.params().set_values(&name, &probe).unwrap();
            let down = loss_value(net, batch);
            probe[i] = base[i];
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i];
            let gap = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { gap / scale };
            let w = Worst {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel,
            };
            if rel > REL_TOL && gap > ABS_FLOOR {
                report.failures.push(w.clone());
            }
            if scale > 1e-6 && report.worst.as_ref().map_or(true, |b| rel > b.rel) {
                report.worst = Some(w);
            }
            report.checked += 1;
        }
        net.params().set_values(&name, &base).unwrap();
    }
    report
}
