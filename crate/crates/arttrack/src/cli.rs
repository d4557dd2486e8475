//! Command-line interface (placeholder during bring-up).

pub fn run_from_env() -> i32 {
    0
}
