use std::time::Instant;
use metalearn_core::eval::{run_cell_seed, AdaptationProtocol};
use metalearn_core::regularizers::RegularizerSpec;

fn main() {
    let protocol = AdaptationProtocol::default(); // SGD, 20 steps, lr 0.01
    println!("== SGD-20 inner with biases: T=1000, m=n=5, seeds 0,1,2 ==");
    for label in ["ReLU", "Tanh", "Tanh+Norm", "Norm", "Diverse"] {
        let reg = RegularizerSpec::from_label(label).unwrap();
        let mut errs = Vec::new();
        let start = Instant::now();
        for seed in [0u64, 1, 2] {
            let (err, eval, sigma, _) = run_cell_seed(&reg, 1000, 5, 5, seed, 600, 5, 5, protocol).unwrap();
            errs.push((err, eval.mean_w_norm, sigma));
        }
        let mean = errs.iter().map(|e| e.0).sum::<f64>() / 3.0;
        let std = {
            let v: Vec<f64> = errs.iter().map(|e| e.0).collect();
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 2.0).sqrt()
        };
        let mw = errs.iter().map(|e| e.1).sum::<f64>() / 3.0;
        let sg = errs.iter().map(|e| e.2).sum::<f64>() / 3.0;
        println!("{label:>10}: mean {mean:.4} +- {std:.4} [{:.3} {:.3} {:.3}] mean|w| {mw:.4} sigma {sg:.4e} [{:.1?}]",
            errs[0].0, errs[1].0, errs[2].0, start.elapsed());
    }
    println!("== criterion 6: ReLU T=100 vs T=10000, seed 0 only ==");
    for (m, n) in [(1usize, 5usize), (5, 5)] {
        for t in [100usize, 10000] {
            let reg = RegularizerSpec::baseline();
            let start = Instant::now();
            let (err, _, _, _) = run_cell_seed(&reg, t, m, n, 0, 600, m, n, protocol).unwrap();
            println!("  (m={m},n={n}) T={t:>5}: {err:.4} [{:.1?}]", start.elapsed());
        }
    }
}
