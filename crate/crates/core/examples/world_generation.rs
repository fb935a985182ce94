//! Builds a procedural world and task suite and shows class names, prompt
//! texts, prototype separation and per-task domain shift.

use giftlab::harness::ExperimentConfig;
use giftlab::worldgen::{build_world, make_task_suite, task_split, write_dataset_csv, Split};

fn main() -> giftlab::Result<()> {
    let c = ExperimentConfig::default();
    let world = build_world(42, &c.world)?;
    let suite = make_task_suite(&world, &c.suite)?;

    let mut min_angle = f64::INFINITY;
    for a in 0..world.num_classes() {
        for b in a + 1..world.num_classes() {
            min_angle = min_angle.min(world.angle_deg(a, b));
        }
    }
    println!("{} classes, smallest prototype angle {min_angle:.1}°", world.num_classes());
    println!("base classes: {}", suite.base_classes.len());
    for t in &suite.tasks {
        let names: Vec<&str> = t.classes.iter().take(4).map(|&k| world.name(k).as_str()).collect();
        println!(
            "task {}: severity {:.2}, classes {} …  e.g. \"{}\"",
            t.index,
            t.transform.severity(),
            names.join(", "),
            world.prompt(t.classes[0]).as_str()
        );
    }

    let test = task_split(&world, &suite.tasks[0], Split::Test)?;
    let path = std::env::temp_dir().join("giftlab_task1_test.csv");
    let mut file = std::fs::File::create(&path).expect("temp file");
    write_dataset_csv(&mut file, &world, &suite.tasks[0], Split::Test, &test, true).expect("csv write");
    println!("wrote {} samples of task 1 to {}", test.len(), path.display());
    Ok(())
}
