//! Fit a linear layer with the tape and Adam, then compare one analytic
//! gradient entry with a central difference.

use ffdc::nn::{AdamConfig, Linear, ParamStore, Tape, Tensor2D};

fn loss(store: &ParamStore, layer: &Linear, x: &Tensor2D, y: &Tensor2D) -> (Tape, ffdc::nn::Var) {
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = layer.forward(&mut tape, store, xv);
    let l = tape.mse(out, y, 1.0);
    (tape, l)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor2D::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]]);
    // Targets from y = 2 x0 - 3 x1 + 0.5.
    let y = Tensor2D::from_rows(&[vec![2.5], vec![-2.5], vec![-0.5], vec![7.5]]);
    let mut store = ParamStore::new(1);
    let layer = Linear::new(&mut store, "fit", 2, 1);
    let adam = AdamConfig { lr: 0.05, ..Default::default() };
    for step in 0..=600 {
        let (tape, l) = loss(&store, &layer, &x, &y);
        if step % 200 == 0 {
            println!("step {step}: loss {:.6}", tape.value(l).get(0, 0));
        }
        let grads = tape.backward(l);
        tape.accumulate(&grads, &mut store);
        store.adam_step(&adam)?;
    }
    println!("w = {:?}, b = {:?}", store.value(layer.w).data(), store.value(layer.b).data());

    let (tape, l) = loss(&store, &layer, &x, &y);
    let grads = tape.backward(l);
    tape.accumulate(&grads, &mut store);
    let analytic = store.grad(layer.w).get(0, 0);
    let h = 1e-5;
    let mut at = |d: f64| {
        store.value_mut(layer.w).data_mut()[0] += d;
        let (t, l) = loss(&store, &layer, &x, &y);
        store.value_mut(layer.w).data_mut()[0] -= d;
        t.value(l).get(0, 0)
    };
    let numeric = (at(h) - at(-h)) / (2.0 * h);
    println!("dL/dw00: analytic {analytic:.3e}, central difference {numeric:.3e}");
    Ok(())
}
