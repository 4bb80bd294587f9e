use std::time::Instant;
use dmlp_mri::cascade::{cascade_backward, cascade_forward, Model, Variant};
use dmlp_mri::nn::{conv_backward, conv_forward, ConvParams};
use dmlp_mri::sim::{make_poisson_mask, simulate, PhantomKind, SimSpec};
use dmlp_mri::train::loss_mse;
use dmlp_mri::volume::{ChannelVolume, Dims};

fn main() {
    let dims = Dims::new(16, 32, 16);
    let mask = make_poisson_mask(32, 16, 4.0, (10, 10), 5).unwrap();
    let spec = SimSpec { dims, n_coils: 4, phantom: PhantomKind::Ellipsoids, noise_std: 0.0, seed: 1 };
    let sample = simulate::<f32>(&spec, &mask).unwrap();

    // Raw conv cost, middle layer shape.
    let x = ChannelVolume::<f32>::zeros(16, dims);
    let p = ConvParams::new(16, 16, (3, 3, 3), vec![0.01; 16 * 16 * 27], vec![0.0; 16]).unwrap();
    let t = Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = conv_forward(&x, &p).unwrap();
    }
    println!("conv fwd 16->16: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
    let up = ChannelVolume::<f32>::zeros(16, dims);
    let t = Instant::now();
    for _ in 0..reps {
        let _ = conv_backward(&x, &p, &up).unwrap();
    }
    println!("conv bwd 16->16: {:.1} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);

    for variant in [Variant::McCnn, Variant::McCnnDmlp] {
        let model = Model::<f32>::init(variant.expand(), 1).unwrap();
        let t = Instant::now();
        let (pred, trace) = cascade_forward(&sample.kspace, &sample.sens, &sample.mask, &model).unwrap();
        let fwd = t.elapsed().as_secs_f64() * 1e3;
        let (_, grad) = loss_mse(&pred, &sample.ground_truth).unwrap();
        let mut grads = model.zero_grads();
        let t = Instant::now();
        cascade_backward(&model, &sample.sens, &sample.mask, &trace, &grad, &mut grads).unwrap();
        let bwd = t.elapsed().as_secs_f64() * 1e3;
        println!("{}: fwd {fwd:.0} ms, bwd {bwd:.0} ms", variant.name());
    }
}
