use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use steerlab_core::nn::Conv2d;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // denoiser-like stack at batch 1, 32x32
    for (cin, cout, hw) in [(3usize, 16usize, 32usize), (16, 16, 32), (16, 32, 16), (32, 32, 16), (48, 16, 32), (16, 3, 32), (8,8,32), (24,8,32)] {
        let conv = Conv2d::<f32>::new(cin, cout, 3, 1, 1, &mut rng);
        let x = Array4::<f32>::from_elem((1, cin, hw, hw), 0.3);
        let reps = 2000;
        let t0 = Instant::now();
        let mut acc = 0.0f32;
        for _ in 0..reps {
            let y = conv.forward(&x.view());
            acc += y[[0,0,0,0]];
        }
        let dt = t0.elapsed().as_secs_f64();
        let flops = 2.0 * (cout * cin * 9 * hw * hw) as f64 * reps as f64;
        println!("conv {cin}->{cout} @{hw}: {:.1} us/eval, {:.2} GFLOPS (acc {acc})", dt / reps as f64 * 1e6, flops / dt / 1e9);
        // backward_data
        let y = conv.forward(&x.view());
        let t0 = Instant::now();
        for _ in 0..reps {
            let g = conv.backward_data(&y.view(), x.dim());
            acc += g[[0,0,0,0]];
        }
        let dt = t0.elapsed().as_secs_f64();
        println!("  bwd_data: {:.1} us/eval, {:.2} GFLOPS", dt / reps as f64 * 1e6, flops / dt / 1e9);
    }
}
