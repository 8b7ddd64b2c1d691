use wam_core::numerics::kernels::matmul_acc;
use std::time::Instant;
fn main() {
    // typical training shapes
    for (m, k, n) in [(40usize, 128usize, 384usize), (40, 128, 512), (40, 512, 128), (320, 128, 384)] {
        let a = vec![1.1f64; m * k];
        let b = vec![0.9f64; k * n];
        let mut c = vec![0.0f64; m * n];
        let reps = 2000;
        let t = Instant::now();
        for _ in 0..reps {
            c.iter_mut().for_each(|x| *x = 0.0);
            matmul_acc(&a, &b, &mut c, m, k, n);
        }
        let el = t.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / el / 1e9;
        println!("{}x{}x{}: {:.2} GFLOP/s", m, k, n, gflops);
    }
}
