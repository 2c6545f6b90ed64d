mod common;

use common::checks::single_step_support;

#[test]
fn only_the_final_step_is_live_for_two_steps() {
    single_step_support(2, 1).unwrap();
}

#[test]
fn only_the_final_step_is_live_for_three_steps() {
    single_step_support(3, 2).unwrap();
}

#[test]
fn only_the_final_step_is_live_for_five_steps() {
    single_step_support(5, 3).unwrap();
}
