//! Central-difference check of the tape gradients: one hand-made function,
//! then the full loss of every model family.

use dpmtl::autodiff::{check_gradients, Tensor};
use dpmtl::gradcheck::{run_case, standard_cases, DEFAULT_STEP};
use dpmtl::models::ModelFamily;

fn main() -> dpmtl::Result<()> {
    // f(w, x) = sum(tanh(w x))
    let w = Tensor::new(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6])?;
    let x = Tensor::new(3, 1, vec![1.0, -0.5, 0.25])?;
    let err = check_gradients(
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let t = tape.tanh(h)?;
            tape.sum(t)
        },
        &[w, x],
        DEFAULT_STEP,
    )?;
    println!("tanh(Wx): max relative error {err:.2e}");
    for family in ModelFamily::ALL {
        for case in standard_cases(family, 3, 0) {
            let o = run_case(&case, DEFAULT_STEP)?;
            println!(
                "{family} d={} layers={} options<={} responses={}: {} parameters, error {:.2e}",
                case.dim, case.layers, case.max_options, case.responses, o.parameters, o.max_relative_error
            );
        }
    }
    Ok(())
}
