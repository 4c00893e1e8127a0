//! Synthetic multitask datasets, task metrics and the experiment runner.

pub mod experiment;
pub mod metrics;
pub mod shapes;
pub mod teacher;

pub use experiment::{run_experiment, results_table, DatasetSpec, ExperimentConfig, ExperimentResult};
pub use metrics::{aggregate_scores, evaluate, MetricReport, TaskMetrics};
pub use shapes::{gen_shapes_dataset, gen_shapes_split, shapes_tasks};
pub use teacher::{gen_linear_teacher, teacher_tasks, LinearTeacher, TeacherConfig};
