//! Compares autodiff gradients with central differences for the CE and
//! distillation terms on a tiny model.

use giftlab::autodiff::{finite_diff, Graph, Tensor};
use giftlab::harness::checks::{relative_error, TOY_ARCH};
use giftlab::losses::{self, ContrastiveMatrix};
use giftlab::model::{ParameterVector, TwoTowerModel};

fn main() -> giftlab::Result<()> {
    let student = TwoTowerModel::new(TOY_ARCH, 1)?;
    let teacher = TwoTowerModel::new(TOY_ARCH, 2)?;
    let images = Tensor::matrix(4, 5, (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect())?;
    let texts = Tensor::matrix(4, 4, (0..16).map(|i| ((i * 5 % 9) as f64 - 4.0) / 3.0).collect())?;
    let target = ContrastiveMatrix::from_embeddings(&teacher.encode(&images, &texts)?)?;

    let objective = |theta: &[f64]| -> giftlab::Result<(f64, Vec<f64>)> {
        let m = TwoTowerModel::from_parts(
            TOY_ARCH,
            1,
            ParameterVector::new(theta.to_vec()),
            student.log_temperature(),
        )?;
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let z = bound.encode_images(&mut g, &images)?;
        let w = bound.encode_texts(&mut g, &texts)?;
        let s = losses::contrastive_matrix_node(&mut g, z, w)?;
        let cd = losses::cd_loss_node(&mut g, s, &target, m.temperature(), teacher.temperature())?;
        let ita = losses::ita_loss_node(&mut g, s, m.temperature())?;
        let root = g.add(cd, ita)?;
        Ok((g.value(root).item()?, bound.flat_gradient(&g.backward(root)?)))
    };

    let theta = student.params().as_slice().to_vec();
    let (value, analytic) = objective(&theta)?;
    let numeric = finite_diff(|t| Ok(objective(t)?.0), &theta, 1e-5)?;
    println!("{} parameters, loss {value:.6}", theta.len());
    println!("relative error ‖g − g_fd‖ / ‖g‖ = {:.2e}", relative_error(&analytic, &numeric));
    for i in (0..theta.len()).step_by(theta.len() / 6) {
        println!("  θ[{i:3}]  autodiff {:+.8}  finite-diff {:+.8}", analytic[i], numeric[i]);
    }
    Ok(())
}
