//! Print the gamma schedule at a few timesteps for the trained and the short
//! inference configurations.

use tilefuse::ScheduleSpec;

fn main() -> tilefuse::Result<()> {
    for (name, spec) in [("trained", ScheduleSpec::TRAINED), ("fast", ScheduleSpec::FAST)] {
        let s = spec.build()?;
        println!("{name}: T = {}, beta in [{}, {}]", s.steps(), spec.beta_start, spec.beta_end);
        let t_max = s.steps();
        for t in [1, t_max / 4, t_max / 2, 3 * t_max / 4, t_max] {
            println!(
                "  t = {t:>4}  beta = {:.3e}  alpha = {:.6}  gamma = {:.6e}  noise scale = {:.4}",
                s.beta(t),
                s.alpha(t),
                s.gamma(t),
                s.sigma(t)
            );
        }
    }
    Ok(())
}
