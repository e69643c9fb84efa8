use htcsim_core::scenario::preset;
use htcsim_core::sim::Simulation;
use std::time::Instant;

fn main() {
    let mut s = preset("atlas_bw", 0.025).unwrap();
    s.overlay.target_pilots = 0;
    s.duration_h = 24.0;
    let t0 = Instant::now();
    let mut sim = Simulation::new(s, false).unwrap();
    let mut events = 0u64;
    let mut last = Instant::now();
    while sim.step().unwrap() {
        events += 1;
        if events % 20_000 == 0 {
            eprintln!(
                "{events} events, sim t={:.2} h, wall {:?} (+{:?})",
                sim.now().as_hours_f64(),
                t0.elapsed(),
                last.elapsed()
            );
            last = Instant::now();
        }
    }
    eprintln!("done: {events} events in {:?}", t0.elapsed());
    eprintln!("queued {} running {}", sim.cluster().queued_jobs(), sim.cluster().running_jobs());
}
