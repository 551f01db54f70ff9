use ndgrad::{ParamStore64, Tape64, Tensor64};
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let (n, c, k, h) = (32, 8, 16, 16);
    let mut store = ParamStore64::new();
    let w = store.insert_glorot("w", &[k, c, 3, 3], c * 9, k * 9, &mut rng);
    let x = Tensor64::new(vec![n, c, h, h], (0..n * c * h * h).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let t0 = std::time::Instant::now();
    let iters = 20;
    for _ in 0..iters {
        let mut tape = Tape64::new();
        let xv = tape.leaf(x.clone(), true);
        let wv = tape.param(&store, w);
        let y = tape.conv2d(xv, wv, 1, 1).unwrap();
        let l = tape.sum(y);
        tape.backward_into(l, &mut store).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (n * k * c * 9 * h * h) as f64 * 3.0 * iters as f64;
    println!("{:.2} GFLOP/s", 2.0 * macs / dt / 1e9);
}
