//! Central-difference gradient check on the reduced plan.

use acm_core::augment::Label;
use acm_core::imaging::GrayImage;
use acm_core::tinycnn::{CnnModel, LayerPlan};

use super::TestRng;

pub const EPS: f64 = 1e-3;
pub const MAX_REL: f64 = 1e-4;
pub const PER_LAYER: usize = 20;

pub struct Check {
    pub worst: f64,
    /// Weights probed per layer.
    pub checked: Vec<usize>,
}

/// Reduced-plan f64 model with small random biases so that no ReLU input
/// sits exactly on the hinge.
fn check_model(seed: u64, rng: &mut TestRng) -> CnnModel<f64> {
    let mut model = CnnModel::<f64>::new(LayerPlan::reduced(), seed).unwrap();
    for l in &mut model.layers {
        for b in &mut l.bias {
            *b = (rng.unit() - 0.5) * 0.1;
        }
    }
    model
}

/// Compares backward() with central differences of batch_loss() on
/// `PER_LAYER` weights per layer plus every bias that admits a clean probe.
/// A draw whose +-eps probes change any ReLU state or pooling argmax crosses
/// a kink, where central differences are not a derivative estimate; those
/// draws are replaced.
pub fn run_check(seed: u64, mask: Option<Vec<f64>>) -> Check {
    let mut rng = TestRng::new(seed);
    let model = check_model(seed, &mut rng);
    let data: Vec<(GrayImage, Label)> = (0..2)
        .map(|i| {
            let img = super::random_image(&mut rng, 28, 28);
            (img, if i == 0 { Label::Vehicle } else { Label::Background })
        })
        .collect();
    let refs: Vec<(&GrayImage, Label)> = data.iter().map(|(p, l)| (p, *l)).collect();
    let mask = mask.as_deref();
    let (_, grads) = model.backward(&refs, mask).unwrap();
    let signature = |m: &CnnModel<f64>| -> Vec<Vec<u32>> {
        refs.iter()
            .map(|(p, _)| m.activation_signature(p, mask).unwrap())
            .collect()
    };
    let base_sig = signature(&model);

    let mut worst = 0.0f64;
    let mut checked = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        let mut done = 0;
        let mut attempts = 0;
        let draws = std::iter::from_fn(|| {
            attempts += 1;
            (attempts <= 2000).then(|| (false, rng.below(layer.weights.len() as u64) as usize))
        });
        let biases = (0..layer.bias.len()).map(|i| (true, i));
        for (is_bias, idx) in draws.chain(biases) {
            if !is_bias && done == PER_LAYER {
                continue;
            }
            let mut plus = model.clone();
            let mut minus = model.clone();
            let a = if is_bias {
                plus.layers[li].bias[idx] += EPS;
                minus.layers[li].bias[idx] -= EPS;
                grads[li].bias[idx]
            } else {
                plus.layers[li].weights[idx] += EPS;
                minus.layers[li].weights[idx] -= EPS;
                grads[li].weights[idx]
            };
            if signature(&plus) != base_sig || signature(&minus) != base_sig {
                continue;
            }
            let lp = plus.batch_loss(&refs, mask).unwrap();
            let lm = minus.batch_loss(&refs, mask).unwrap();
            let n = (lp - lm) / (2.0 * EPS);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            worst = worst.max(rel);
            if !is_bias {
                done += 1;
            }
        }
        checked.push(done);
    }
    Check { worst, checked }
}
