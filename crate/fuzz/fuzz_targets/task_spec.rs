#![no_main]

use agm_core::query::{Curriculum, TaskList, TaskSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = data.parse::<TaskSpec>();
    if let Ok(list) = data.parse::<TaskList>() {
        let _ = Curriculum::from_list(&list);
        let _ = Curriculum::from_list(&list.with_image_shape(Some((8, 8))));
    }
});
