//! Training-step timing probe (dev tool).
use std::time::Instant;
use stdnet_core::autodiff::Tape;
use stdnet_core::data::synth::{synth_generate, Split, SynthConfig};
use stdnet_core::losses::Reduction;
use stdnet_core::nn::Adam;
use stdnet_core::pipeline::*;

fn main() {
    let synth = SynthConfig { canvas: 128, n_train: 2, ..Default::default() };
    let samples = synth_generate(&synth, Split::Train, 2).unwrap();
    let arch = ArchConfig { std_channels: 8, tblock_channels: 8, mnet_base: 8, mnet_depth: 4 };
    let mut model = StdNet::new(Task::Vessel, Variant::Std, arch, 1);
    let mut adam = Adam::new(1e-3, model.store.len());
    let weights = stdnet_core::losses::LossWeights::default();

    let mut images = ndarray::Array4::<f64>::zeros((2, 3, 128, 128));
    let mut gt = ndarray::Array4::<f64>::zeros((2, 1, 128, 128));
    for (i, s) in samples.iter().enumerate() {
        images.index_axis_mut(ndarray::Axis(0), i).assign(&s.image);
        gt.index_axis_mut(ndarray::Axis(0), i).zip_mut_with(&s.mask, |g, &m| *g = m as f64);
    }
    let gt = gt.into_dyn();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, images.clone(), true).unwrap();
        let t_fwd = t0.elapsed();
        let (total, _) = compose_loss(&mut tape, &fwd, &gt, Variant::Std, &weights, Reduction::Sum);
        let t_loss = t0.elapsed();
        let grads = tape.backward(total);
        let t_bwd = t0.elapsed();
        adam.step(&mut model.store, &grads);
        let t_adam = t0.elapsed();
        println!(
            "round {round}: fwd {:.0} ms, loss {:.0} ms, bwd {:.0} ms, adam {:.0} ms, total {:.0} ms",
            t_fwd.as_secs_f64() * 1e3,
            (t_loss - t_fwd).as_secs_f64() * 1e3,
            (t_bwd - t_loss).as_secs_f64() * 1e3,
            (t_adam - t_bwd).as_secs_f64() * 1e3,
            t_adam.as_secs_f64() * 1e3,
        );
    }
}
