// Compares backprop-through-time gradients of a multi-modal Delta-RNN with
// central finite differences, in f64.
//
// ```text
// cargo run --example gradient_check
// ```

use mmlm::cells::CellKind;
use mmlm::grad::finite_diff_check_with_floor;
use mmlm::lm::{FusionKind, Model, ModelConfig, SequenceBatch};

pub fn run_example() -> mmlm::Result<f64> {
    let config = ModelConfig::new(CellKind::DeltaRnn, 8, 12, FusionKind::Outer).with_context_dim(4);
    let mut model = Model::<f64>::init(config, 5)?;

    // Two sequences of four steps; the last step of the second is padding.
    let batch = SequenceBatch {
        inputs: vec![vec![2, 2], vec![4, 7], vec![5, 8], vec![6, 9]],
        targets: vec![vec![4, 7], vec![5, 8], vec![6, 9], vec![3, 0]],
        mask: vec![vec![true, true], vec![true, true], vec![true, true], vec![true, false]],
        contexts: Some(vec![Some(vec![0.5, -0.25, 0.0, 1.0]), Some(vec![-1.0, 0.5, 0.25, 0.0])]),
        image_ids: vec!["a".into(), "b".into()],
    };

    let params = model.params();
    let report = finite_diff_check_with_floor(
        |p| {
            model.set_params(p)?;
            let (nll, grads) = model.nll_and_gradients(&batch)?;
            Ok((nll.loss, grads))
        },
        &params,
        1e-5,
        1e-8,
    )?;
    println!(
        "checked {} parameters: max relative error {:.2e}, max absolute error {:.2e}",
        params.iter().map(|t| t.len()).sum::<usize>(),
        report.max_relative_error,
        report.max_abs_error
    );
    Ok(report.max_relative_error)
}

#[allow(dead_code)]
fn main() -> mmlm::Result<()> {
    run_example().map(|_| ())
}
