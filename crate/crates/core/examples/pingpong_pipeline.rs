//! Closed-form ping-pong latencies against the event simulator, plus a
//! timeline CSV for a Gantt plot.

use moeplan::pipeline::{closed_form_iter_bounds, closed_form_total, min_microbatches, simulate, StageTimes};

fn main() -> moeplan::Result<()> {
    let layers = 4;
    for (t_a, t_e, t_c) in [(1.0, 1.0, 0.2), (1.0, 0.8, 0.4), (1.0, 1.0, 0.6)] {
        let times = StageTimes::new(t_a, t_e, t_c)?;
        let min_m = min_microbatches(t_c, times.t_f())?;
        println!("T_a={t_a} T_e={t_e} T_c={t_c}: at least {min_m} micro-batches");
        for m in 1..=min_m + 1 {
            let sim = simulate(&times, m, layers)?;
            if m < min_m {
                println!(
                    "  m={m}: total {:.3}, iteration {:.3} (communication exposed, closed forms do not apply)",
                    sim.total_latency,
                    sim.mean_iter_latency()
                );
                continue;
            }
            let (lo, hi) = closed_form_iter_bounds(&times, m, layers)?;
            println!(
                "  m={m}: total {:.3} (closed form {:.3}), iteration {:.3} in [{lo:.3}, {hi:.3}], idle attn {:.2} expert {:.2}",
                sim.total_latency,
                closed_form_total(&times, m, layers)?,
                sim.mean_iter_latency(),
                sim.attention_idle_fraction,
                sim.expert_idle_fraction
            );
        }
    }

    let path = std::env::temp_dir().join("pingpong_timeline.csv");
    let sim = simulate(&StageTimes::new(1.0, 1.0, 0.4)?, 3, 2)?;
    sim.write_timeline_csv(std::fs::File::create(&path).map_err(|source| moeplan::Error::Io {
        path: path.clone(),
        source,
    })?)?;
    println!("\ntimeline for m=3, L=2 written to {}", path.display());
    Ok(())
}
