use atf_core::attack::{fgsm, jsma, AttackParams};
use atf_core::zoo::{bank_specs, synth_dataset, train};

fn main() {
    for (per_class, epochs) in [(16usize, 16usize), (32, 24), (48, 24)] {
        let data = synth_dataset(7, per_class);
        let t0 = std::time::Instant::now();
        let (model, report) = train(&bank_specs().remove(0), &data, epochs, 11).unwrap();
        let secs = t0.elapsed().as_secs_f64();

        let fgsm16 = data
            .samples
            .iter()
            .take(40)
            .filter(|s| fgsm(&model, s, &AttackParams::default()).unwrap().surrogate_evading)
            .count();
        let j = |budget: usize| {
            let p = AttackParams {
                iterations: budget,
                ..Default::default()
            };
            data.samples
                .iter()
                .take(10)
                .filter(|s| jsma(&model, s, &p).unwrap().surrogate_evading)
                .count()
        };
        println!(
            "pc={per_class:<3} ep={epochs:<3} acc={:.3} fgsm16={fgsm16}/40 jsma1={}/10 jsma200={}/10 train={secs:.1}s",
            report.held_out_accuracy,
            j(1),
            j(200)
        );
    }
}
