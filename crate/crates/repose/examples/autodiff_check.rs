//! A look at the substrate: build a gated convolution on the tape, verify
//! its analytic gradients against central finite differences, and show the
//! gate saturation limits.
//!
//! ```bash
//! cargo run --release -p repose --example autodiff_check
//! ```

use repose::nn::{Bound, GatedConv};
use repose::rng::Rng;
use repose::tensor::{Tape, Tensor};

fn main() {
    let mut rng = Rng::from_seed(5);
    let gc = GatedConv::new("demo", 2, 3, 3, 1, &mut rng);
    let x0 = Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);

    let readout = |x: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let mut bound = Bound::new();
        let xi = tape.constant(x.clone());
        let y = gc.forward(&mut tape, &mut bound, xi);
        let y2 = tape.mul(y, y);
        let s = tape.mean_all(y2);
        tape.value(s).item()
    };

    // analytic gradient w.r.t. the input
    let mut tape = Tape::new();
    let mut bound = Bound::new();
    let xi = tape.leaf(x0.clone());
    let y = gc.forward(&mut tape, &mut bound, xi);
    let y2 = tape.mul(y, y);
    let s = tape.mean_all(y2);
    let grads = tape.backward(s);
    let analytic = grads.get(xi).unwrap();

    let mut worst = 0.0f64;
    for i in (0..x0.len()).step_by(7) {
        let h = 1e-4;
        let mut xp = x0.clone();
        xp.data_mut()[i] += h;
        let mut xm = x0.clone();
        xm.data_mut()[i] -= h;
        let fd = (readout(&xp) - readout(&xm)) / (2.0 * h);
        let an = analytic.data()[i];
        let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-9);
        worst = worst.max(rel);
    }
    println!("gated conv input gradient vs finite differences: worst relative error {worst:.2e}");

    // gate saturation: a huge negative gate bias silences the block
    let mut silenced = GatedConv::new("silenced", 2, 3, 3, 1, &mut Rng::from_seed(5));
    for b in silenced.gate.b.data_mut() {
        *b = -1e6;
    }
    let mut tape = Tape::new();
    let mut bound = Bound::new();
    let xi = tape.constant(x0.clone());
    let y = silenced.forward(&mut tape, &mut bound, xi);
    println!("gate bias -1e6: max |output| = {:.3e}", tape.value(y).max_abs());

    let mut open = GatedConv::new("open", 2, 3, 3, 1, &mut Rng::from_seed(5));
    for b in open.gate.b.data_mut() {
        *b = 1e6;
    }
    let mut tape = Tape::new();
    let mut bound = Bound::new();
    let xi = tape.constant(x0);
    let gated = open.forward(&mut tape, &mut bound, xi);
    let plain = open.feature.forward(&mut tape, &mut bound, xi);
    let plain = tape.leaky_relu(plain, open.slope);
    let diff = tape.sub(gated, plain);
    let ad = tape.abs(diff);
    let m = tape.mean_all(ad);
    println!("gate bias +1e6: mean |gated - plain conv| = {:.3e}", tape.value(m).item());
}
