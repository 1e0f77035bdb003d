use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

/// System allocator that tracks live bytes, their peak, and the largest
/// single request.
pub struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static LARGEST: AtomicUsize = AtomicUsize::new(0);

fn grew(size: usize) {
    let live = LIVE.fetch_add(size, Ordering::Relaxed) + size;
    PEAK.fetch_max(live, Ordering::Relaxed);
    LARGEST.fetch_max(size, Ordering::Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            grew(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            grew(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            LIVE.fetch_sub(layout.size(), Ordering::Relaxed);
            grew(new_size);
        }
        p
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Usage {
    /// Peak live bytes above the level at `reset`.
    pub peak: usize,
    pub largest: usize,
}

/// Starts a measurement window. Windows must not overlap, so callers hold
/// `WINDOW` while measuring.
pub fn reset() -> usize {
    let live = LIVE.load(Ordering::Relaxed);
    PEAK.store(live, Ordering::Relaxed);
    LARGEST.store(0, Ordering::Relaxed);
    live
}

pub fn usage(base: usize) -> Usage {
    Usage {
        peak: PEAK.load(Ordering::Relaxed).saturating_sub(base),
        largest: LARGEST.load(Ordering::Relaxed),
    }
}

pub static WINDOW: std::sync::Mutex<()> = std::sync::Mutex::new(());

pub fn measure<T>(f: impl FnOnce() -> T) -> (T, Usage) {
    let _guard = WINDOW.lock().unwrap_or_else(|e| e.into_inner());
    let base = reset();
    let out = f();
    (out, usage(base))
}

/// Bytes of a dense n×n f64 matrix.
pub fn square_bytes(n: usize) -> usize {
    n * n * std::mem::size_of::<f64>()
}
