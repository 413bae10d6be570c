use kubm::flowcodec::{reconstruction_rmse, train_flow_ae, FlowTrainConfig};
use kubm::synthbench::env::{EnvKind, ObsFamily, ToyEnv};
use std::time::Instant;

fn main() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x11ae);
    // mirror criterion 11: burn the shape/nonneg draws? No: fresh rng, same family shape
    let base = ToyEnv::new(EnvKind::LinearCoupled, ObsFamily::Flow, 0x11ae).flow_frame();
    let frames: Vec<Vec<[f64; 2]>> = (0..200)
        .map(|_| {
            let dx = rng.gen_range(-16.0..16.0);
            let dy = rng.gen_range(-16.0..16.0);
            base.iter()
                .map(|p| [p[0] + dx, p[1] + dy])
                .collect::<Vec<_>>()
        })
        .collect();

    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let decay: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.995);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(150);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(5);
    let batch: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(64);

    let cfg = FlowTrainConfig {
        learning_rate: lr,
        lr_decay: decay,
        epochs,
        batch_size: batch,
        seed,
    };
    let t0 = Instant::now();
    let (codec, rec) = train_flow_ae(&frames, &cfg).unwrap();
    let train_time = t0.elapsed();
    let rmse = reconstruction_rmse(&codec, &frames).unwrap();
    let n = rec.loss_curve.len();
    println!(
        "lr={lr} decay={decay} epochs={epochs} seed={seed} batch={batch}: rmse={rmse:.4}px in {train_time:?} (loss first {:.3e} mid {:.3e} last {:.3e})",
        rec.loss_curve[0],
        rec.loss_curve[n / 2],
        rec.loss_curve[n - 1]
    );

    // Residual breakdown: per grid position class.
    let mut sq_border = (0.0, 0usize);
    let mut sq_inner = (0.0, 0usize);
    let mut sq_obj = (0.0, 0usize);
    let mut sq_goal = (0.0, 0usize);
    for frame in &frames {
        let rec_pts = codec.decode(&codec.encode(frame).unwrap()).unwrap();
        for (j, (p, q)) in frame.iter().zip(rec_pts.iter()).enumerate() {
            let e = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            let (row, col) = (j / 16, j % 16);
            if row == 0 || row == 15 || col == 0 || col == 15 {
                sq_border.0 += e;
                sq_border.1 += 1;
            } else {
                sq_inner.0 += e;
                sq_inner.1 += 1;
            }
            if j < 192 {
                sq_obj.0 += e;
                sq_obj.1 += 1;
            } else {
                sq_goal.0 += e;
                sq_goal.1 += 1;
            }
        }
    }
    let rm = |s: (f64, usize)| (s.0 / s.1 as f64).sqrt();
    println!(
        "  border {:.3}px inner {:.3}px | obj-rows {:.3}px goal-rows {:.3}px",
        rm(sq_border),
        rm(sq_inner),
        rm(sq_obj),
        rm(sq_goal)
    );
}
