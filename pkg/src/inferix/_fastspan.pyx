# cython: language_level=3, boundscheck=False, wraparound=False
"""C fast path for span recording: one guard per scope, two clock reads,
four 64-bit stores. Guards are pooled per collector and a collector is
confined to one thread."""

from libc.stdlib cimport malloc, free
from posix.time cimport clock_gettime, timespec, CLOCK_MONOTONIC

cdef inline long long _now() nogil:
    cdef timespec ts
    clock_gettime(CLOCK_MONOTONIC, &ts)
    return <long long>ts.tv_sec * 1000000000LL + ts.tv_nsec

DEF STACK_MAX = 4096

cdef class Guard


cdef class Collector:
    cdef long long* data          # 4 * capacity: name_id, start, end, parent_id
    cdef int* stack
    cdef Py_ssize_t capacity, depth
    cdef public long long n       # spans recorded (including dropped)
    cdef dict name_ids
    cdef list names
    cdef list pool
    cdef public dict start_hooks  # shared with the owning profiler
    cdef public dict end_hooks
    cdef public object hook_error_cb

    def __cinit__(self, Py_ssize_t capacity):
        self.capacity = capacity
        self.data = <long long*>malloc(4 * capacity * sizeof(long long))
        self.stack = <int*>malloc(STACK_MAX * sizeof(int))
        if self.data == NULL or self.stack == NULL:
            raise MemoryError()
        self.n = 0
        self.depth = 0
        self.name_ids = {}
        self.names = []
        self.pool = []
        self.start_hooks = {}
        self.end_hooks = {}
        self.hook_error_cb = None

    def __dealloc__(self):
        if self.data != NULL:
            free(self.data)
        if self.stack != NULL:
            free(self.stack)

    cpdef Guard scoped(self, str name):
        # One cached guard per name covers the hot non-reentrant case with no
        # allocation; recursive spans of the same name fall back to the pool.
        cdef Guard g = <Guard>self.name_ids.get(name)
        cdef Guard g2
        cdef list pool = self.pool
        if g is None:
            g = Guard.__new__(Guard)
            g.col = self
            g.name_id = <int>len(self.names)
            g.busy = False
            self.name_ids[name] = g
            self.names.append(name)
            return g
        if not g.busy:
            return g
        if pool:
            g2 = <Guard>pool.pop()
        else:
            g2 = Guard.__new__(Guard)
            g2.col = self
            g2.busy = False
        g2.name_id = g.name_id
        g2.pooled = True
        return g2

    def current_name(self):
        if self.depth == 0:
            return None
        return self.names[self.stack[self.depth - 1]]

    def dropped(self):
        return max(0, self.n - self.capacity)

    def records(self):
        """Decoded (name, start_ns, end_ns, parent_name) tuples, oldest first."""
        cdef long long total = self.n
        cdef long long first = 0 if total <= self.capacity else total - self.capacity
        cdef long long i, idx
        out = []
        for i in range(first, total):
            idx = (i % self.capacity) * 4
            name = self.names[self.data[idx]]
            parent = None if self.data[idx + 3] < 0 else self.names[self.data[idx + 3]]
            out.append((name, self.data[idx + 1], self.data[idx + 2], parent))
        return out

    cdef void _run_hooks(self, dict hooks, str name, object duration):
        for cb in list(hooks.values()):
            try:
                cb(name, duration)
            except Exception:
                if self.hook_error_cb is not None:
                    self.hook_error_cb()


cdef class Guard:
    cdef Collector col
    cdef public int name_id
    cdef long long start
    cdef bint busy
    cdef bint pooled

    def __enter__(self):
        cdef Collector col = self.col
        if col.start_hooks:
            col._run_hooks(col.start_hooks, col.names[self.name_id], None)
        if col.depth < STACK_MAX:
            col.stack[col.depth] = self.name_id
        col.depth += 1
        self.busy = True
        self.start = _now()
        return self

    def __exit__(self, t, v, tb):
        cdef long long end = _now()
        cdef Collector col = self.col
        cdef long long parent
        cdef Py_ssize_t slot
        col.depth -= 1
        parent = col.stack[col.depth - 1] if col.depth > 0 else -1
        slot = (self.n_slot()) * 4
        col.data[slot] = self.name_id
        col.data[slot + 1] = self.start
        col.data[slot + 2] = end
        col.data[slot + 3] = parent
        col.n += 1
        self.busy = False
        if self.pooled:
            self.pooled = False
            col.pool.append(self)
        if col.end_hooks:
            col._run_hooks(col.end_hooks, col.names[self.name_id], end - self.start)
        return False

    cdef inline Py_ssize_t n_slot(self):
        cdef Collector col = self.col
        if col.n < col.capacity:
            return <Py_ssize_t>col.n
        return <Py_ssize_t>(col.n % col.capacity)
