//! Single-query inference allocates O(|E|) memory up front and nothing after.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;

use cenet_bench::fixture;
use cenet_core::eval::{infer_query, Scratch};
use cenet_core::{InferenceConfig, MaskMode};

struct Counting;

thread_local! {
    static BYTES: Cell<usize> = const { Cell::new(0) };
    static CALLS: Cell<usize> = const { Cell::new(0) };
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let _ = BYTES.try_with(|b| b.set(b.get() + layout.size()));
        let _ = CALLS.try_with(|c| c.set(c.get() + 1));
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let _ = BYTES.try_with(|b| b.set(b.get() + new_size));
        let _ = CALLS.try_with(|c| c.set(c.get() + 1));
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

fn counted<T>(f: impl FnOnce() -> T) -> (T, usize, usize) {
    let (b0, c0) = (BYTES.with(Cell::get), CALLS.with(Cell::get));
    let v = f();
    (v, BYTES.with(Cell::get) - b0, CALLS.with(Cell::get) - c0)
}

#[test]
fn single_query_allocation_is_linear_in_entities() {
    let dim = 32;
    for mode in [
        MaskMode::None,
        MaskMode::Soft,
        MaskMode::Hard,
        MaskMode::Random,
        MaskMode::GroundTruth,
    ] {
        let cfg = InferenceConfig {
            mask_mode: mode,
            ..Default::default()
        };
        for entities in [200, 800, 3200] {
            let f = fixture(entities, dim);
            let queries = &f.contexts.test;
            let (mut scratch, setup, _) = counted(|| Scratch::new(entities, dim));
            // four f64 rows, one bool row and a few d-sized buffers
            let bound = entities * (4 * 8 + 1) + 16 * 8 * dim;
            assert!(
                setup <= bound,
                "{mode:?} E={entities}: scratch {setup} bytes > {bound}"
            );

            let (_, bytes, calls) = counted(|| {
                for (i, q) in queries.iter().enumerate() {
                    infer_query(&f.params, q, &cfg, 2.0, i as u64, &mut scratch).unwrap();
                }
            });
            assert_eq!(
                (bytes, calls),
                (0, 0),
                "{mode:?} E={entities}: {} queries allocated {bytes} bytes in {calls} calls",
                queries.len()
            );
        }
    }
}
