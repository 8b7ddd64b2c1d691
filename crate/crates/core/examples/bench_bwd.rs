use std::time::Instant;
use wam_core::numerics::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc};

fn bench(name: &str, f: &mut dyn FnMut(), flops: f64) {
    let reps = 300;
    let t = Instant::now();
    for _ in 0..reps {
        f();
    }
    let el = t.elapsed().as_secs_f64();
    println!("{name}: {:.2} GFLOP/s ({:.3} ms)", flops * reps as f64 / el / 1e9, el / reps as f64 * 1e3);
}

fn main() {
    // backward shapes of one joint step (per layer, batched rows = 320)
    let shapes = [
        ("fwd qkv nn 320x128x384", 320, 128, 384),
        ("fwd fc1 nn 320x128x512", 320, 128, 512),
        ("fwd fc2 nn 320x512x128", 320, 512, 128),
    ];
    for (name, m, k, n) in shapes {
        let a = vec![1.0; m * k];
        let b = vec![1.0; k * n];
        let mut c = vec![0.0; m * n];
        bench(name, &mut || matmul_acc(&a, &b, &mut c, m, k, n), 2.0 * (m * k * n) as f64);
    }
    // dA = gy * B^T : nt with (m, n, k) = (320, 384, 128)
    let gy = vec![1.0; 320 * 384];
    let b = vec![1.0; 128 * 384];
    let mut da = vec![0.0; 320 * 128];
    bench("bwd dA nt 320x384->128", &mut || matmul_nt_acc(&gy, &b, &mut da, 320, 384, 128), 2.0 * (320 * 384 * 128) as f64);
    let gy2 = vec![1.0; 320 * 128];
    let b2 = vec![1.0; 512 * 128];
    let mut da2 = vec![0.0; 320 * 512];
    bench("bwd dA nt 320x128->512", &mut || matmul_nt_acc(&gy2, &b2, &mut da2, 320, 128, 512), 2.0 * (320 * 128 * 512) as f64);
    // dW = A^T gy : tn with (m, k, n) = (320, 128, 384)
    let a = vec![1.0; 320 * 128];
    let gy3 = vec![1.0; 320 * 384];
    let mut dw = vec![0.0; 128 * 384];
    bench("bwd dW tn 320:128x384", &mut || matmul_tn_acc(&a, &gy3, &mut dw, 320, 128, 384), 2.0 * (320 * 128 * 384) as f64);
    let a2 = vec![1.0; 320 * 512];
    let mut dw2 = vec![0.0; 512 * 128];
    bench("bwd dW tn 320:512x128", &mut || matmul_tn_acc(&a2, &gy2, &mut dw2, 320, 512, 128), 2.0 * (320 * 512 * 128) as f64);
}
