//! Backpropagation against central finite differences on a small MLP.
//!
//! cargo run --example gradient_check

use streamsgd::datagen::{generate_dataset, DatasetSpec};
use streamsgd::nn::{Architecture, Batch, Classifier};

fn main() -> streamsgd::Result<()> {
    let spec =
        DatasetSpec { n_classes: 5, feature_dim: 8, samples_per_class: 10, cluster_spread: 1.0, mean_scale: 1.0 };
    let data = generate_dataset(&spec, 7)?;
    let mut batch = Batch::with_dim(spec.feature_dim);
    for i in 0..16 {
        batch.push(data.train.row(i * 2), data.train.labels[i * 2]);
    }

    let clf = Classifier::new(Architecture::mlp(8, &[12, 6], 5))?;
    let params = clf.init_params(1);
    let (loss, grad) = clf.loss_and_grad(&params, &batch)?;
    println!("{} parameters, loss {loss:.6}", params.len());

    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in (0..params.len()).step_by(7) {
        let mut p = params.clone();
        p[i] += h;
        let up = clf.forward_loss(&p, &batch)?;
        p[i] -= 2.0 * h;
        let down = clf.forward_loss(&p, &batch)?;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6));
    }
    println!("max relative error {worst:.2e}");
    Ok(())
}
