# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled graph-walk and insertion kernels.

Mirrors ``_pykernel`` exactly in behaviour; see that module for the
reference formulation. All vertex references are internal row indices.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memset

cnp.import_array()

BACKEND = "cython"

cdef struct Cand:
    double s
    long long i


cdef inline bint better(double s1, long long i1, double s2, long long i2) noexcept nogil:
    # Equal scores: lower vertex index wins.
    return s1 > s2 or (s1 == s2 and i1 < i2)


cdef struct Heap:
    Cand* a
    Py_ssize_t n
    Py_ssize_t cap
    bint is_max


cdef int heap_init(Heap* h, Py_ssize_t cap, bint is_max) noexcept nogil:
    if cap < 8:
        cap = 8
    h.a = <Cand*> malloc(cap * sizeof(Cand))
    h.n = 0
    h.cap = cap
    h.is_max = is_max
    return 0 if h.a != NULL else -1


cdef inline bint heap_above(Heap* h, Cand x, Cand y) noexcept nogil:
    # True when x belongs closer to the root than y.
    if h.is_max:
        return better(x.s, x.i, y.s, y.i)
    return better(y.s, y.i, x.s, x.i)


cdef int heap_push(Heap* h, double s, long long i) noexcept nogil:
    cdef Py_ssize_t k, parent
    cdef Cand tmp
    cdef Cand* grown
    if h.n == h.cap:
        grown = <Cand*> realloc(h.a, 2 * h.cap * sizeof(Cand))
        if grown == NULL:
            return -1
        h.a = grown
        h.cap *= 2
    k = h.n
    h.a[k].s = s
    h.a[k].i = i
    h.n += 1
    while k > 0:
        parent = (k - 1) >> 1
        if heap_above(h, h.a[k], h.a[parent]):
            tmp = h.a[k]
            h.a[k] = h.a[parent]
            h.a[parent] = tmp
            k = parent
        else:
            break
    return 0


cdef Cand heap_pop(Heap* h) noexcept nogil:
    cdef Cand top = h.a[0]
    cdef Cand tmp
    cdef Py_ssize_t k = 0, c, best
    h.n -= 1
    if h.n > 0:
        h.a[0] = h.a[h.n]
        while True:
            best = k
            c = 2 * k + 1
            if c < h.n and heap_above(h, h.a[c], h.a[best]):
                best = c
            c += 1
            if c < h.n and heap_above(h, h.a[c], h.a[best]):
                best = c
            if best == k:
                break
            tmp = h.a[k]
            h.a[k] = h.a[best]
            h.a[best] = tmp
            k = best
    return top


cdef inline double sim_fd(const float* a, const double* q, Py_ssize_t d, int metric) noexcept nogil:
    cdef double acc = 0.0, t
    cdef Py_ssize_t j
    if metric == 0:
        for j in range(d):
            t = a[j] - q[j]
            acc += t * t
        return -sqrt(acc)
    for j in range(d):
        acc += a[j] * q[j]
    return acc


cdef inline double sim_ff(const float* a, const float* b, Py_ssize_t d, int metric) noexcept nogil:
    cdef double acc = 0.0, t
    cdef Py_ssize_t j
    if metric == 0:
        for j in range(d):
            t = <double> a[j] - <double> b[j]
            acc += t * t
        return -sqrt(acc)
    for j in range(d):
        acc += (<double> a[j]) * (<double> b[j])
    return acc


cdef struct Ctx:
    const float* vec
    Py_ssize_t d
    int metric
    const double* q
    unsigned int* seen        # score-cache tags, one per vertex
    double* cache             # cached scores for the current query
    unsigned int seen_tag
    unsigned int* checked     # per-layer visited tags
    unsigned int check_tag
    long long evals
    long long budget          # stop expanding once evals reaches this; 0 = no cap


cdef inline double ctx_score(Ctx* c, long long v) noexcept nogil:
    if c.seen[v] == c.seen_tag:
        return c.cache[v]
    cdef double s = sim_fd(c.vec + v * c.d, c.q, c.d, c.metric)
    c.seen[v] = c.seen_tag
    c.cache[v] = s
    c.evals += 1
    return s


cdef int walk_layer(Ctx* c, const int* links, const int* counts, Py_ssize_t width,
                    long long* entries, Py_ssize_t n_entries, Py_ssize_t factor,
                    Heap* W) noexcept nogil:
    """Bounded best-first walk. On return ``W`` is a min-heap of <= factor hits."""
    cdef Heap C
    cdef Cand cur, worst
    cdef Py_ssize_t e, j, deg
    cdef long long v
    cdef double s
    if heap_init(&C, 64, True) != 0:
        return -1
    W.n = 0
    for e in range(n_entries):
        v = entries[e]
        if c.checked[v] == c.check_tag:
            continue
        c.checked[v] = c.check_tag
        s = ctx_score(c, v)
        heap_push(&C, s, v)
        heap_push(W, s, v)
        if W.n > factor:
            heap_pop(W)
    while C.n > 0:
        cur = heap_pop(&C)
        worst = W.a[0]
        if W.n >= factor and better(worst.s, worst.i, cur.s, cur.i):
            break
        if c.budget > 0 and c.evals >= c.budget:
            break
        deg = counts[cur.i]
        for j in range(deg):
            v = links[cur.i * width + j]
            if c.checked[v] == c.check_tag:
                continue
            c.checked[v] = c.check_tag
            s = ctx_score(c, v)
            if W.n < factor or better(s, v, W.a[0].s, W.a[0].i):
                if heap_push(&C, s, v) != 0 or heap_push(W, s, v) != 0:
                    free(C.a)
                    return -1
                if W.n > factor:
                    heap_pop(W)
    free(C.a)
    return 0


cdef void bump_check(Ctx* c, Py_ssize_t n) noexcept nogil:
    c.check_tag += 1
    if c.check_tag == 0:
        memset(c.checked, 0, n * sizeof(unsigned int))
        c.check_tag = 1


cdef void drain_sorted(Heap* W, long long* out_i, double* out_s) noexcept nogil:
    # W is a min-heap; popping yields worst-first, so fill from the back.
    cdef Py_ssize_t k = W.n
    cdef Cand x
    while W.n > 0:
        x = heap_pop(W)
        k -= 1
        out_i[k] = x.i
        out_s[k] = x.s


cdef class Scratch:
    """Per-thread buffers reused across queries against one graph."""
    cdef public cnp.ndarray seen, cache, checked
    cdef unsigned int seen_tag, check_tag

    def __init__(self, Py_ssize_t capacity):
        self.seen = np.zeros(max(capacity, 1), dtype=np.uint32)
        self.cache = np.zeros(max(capacity, 1), dtype=np.float64)
        self.checked = np.zeros(max(capacity, 1), dtype=np.uint32)
        self.seen_tag = 0
        self.check_tag = 0

    @property
    def capacity(self):
        return self.seen.shape[0]

    cdef void begin(self, Ctx* c):
        self.seen_tag += 1
        if self.seen_tag == 0:
            self.seen[:] = 0
            self.seen_tag = 1
        c.seen = <unsigned int*> cnp.PyArray_DATA(self.seen)
        c.cache = <double*> cnp.PyArray_DATA(self.cache)
        c.checked = <unsigned int*> cnp.PyArray_DATA(self.checked)
        c.seen_tag = self.seen_tag
        c.check_tag = self.check_tag
        c.evals = 0
        c.budget = 0

    cdef void end(self, Ctx* c):
        self.check_tag = c.check_tag


def search_layer(const float[:, ::1] vectors, const int[:, ::1] links, const int[::1] counts,
                 int metric, const double[::1] q, long long[::1] entries, Py_ssize_t factor,
                 Scratch scratch):
    """Walk one layer from ``entries``; return (indices, scores, evaluations) best-first."""
    cdef Ctx c
    cdef Heap W
    cdef Py_ssize_t n = vectors.shape[0]
    cdef int rc
    c.vec = &vectors[0, 0]
    c.d = vectors.shape[1]
    c.metric = metric
    c.q = &q[0]
    scratch.begin(&c)
    if heap_init(&W, factor + 2, False) != 0:
        raise MemoryError()
    with nogil:
        bump_check(&c, n)
        rc = walk_layer(&c, &links[0, 0], &counts[0], links.shape[1],
                        &entries[0], entries.shape[0], factor, &W)
    scratch.end(&c)
    if rc != 0:
        free(W.a)
        raise MemoryError()
    out_i = np.empty(W.n, dtype=np.int64)
    out_s = np.empty(W.n, dtype=np.float64)
    cdef long long[::1] oi = out_i
    cdef double[::1] os_ = out_s
    if W.n > 0:
        drain_sorted(&W, &oi[0], &os_[0])
    free(W.a)
    return out_i, out_s, c.evals


cdef long long descend(Ctx* c, Py_ssize_t n, const int* up_links, const int* up_counts,
                       Py_ssize_t m_up, long long entry, int from_layer, int to_layer,
                       Heap* W) noexcept nogil:
    """Greedy factor-1 walk from ``from_layer`` down to ``to_layer`` (exclusive)."""
    cdef int t
    cdef long long cur = entry
    for t in range(from_layer, to_layer, -1):
        bump_check(c, n)
        if walk_layer(c, up_links + (t - 1) * n * m_up, up_counts + (t - 1) * n,
                      m_up, &cur, 1, 1, W) != 0:
            return -1
        cur = W.a[0].i
    return cur


def knn_search(const float[:, ::1] vectors, const int[:, ::1] links0, const int[::1] counts0,
               const int[:, :, ::1] links_up, const int[:, ::1] counts_up,
               long long entry, int max_layer, int metric, const double[::1] q,
               Py_ssize_t l, Py_ssize_t k, Scratch scratch, long long max_evals=0):
    """Full multi-layer search; returns the top ``k`` of a width-``l`` bottom walk.

    ``max_evals > 0`` stops expanding vertices once that many similarities
    have been computed.
    """
    cdef Ctx c
    cdef Heap W
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t m_up = links_up.shape[2]
    cdef long long cur
    cdef int rc = 0
    cdef const int* up_l = NULL
    cdef const int* up_c = NULL
    if max_layer > 0:
        up_l = &links_up[0, 0, 0]
        up_c = &counts_up[0, 0]
    c.vec = &vectors[0, 0]
    c.d = vectors.shape[1]
    c.metric = metric
    c.q = &q[0]
    scratch.begin(&c)
    c.budget = max_evals
    if heap_init(&W, (l if l > 1 else 1) + 2, False) != 0:
        raise MemoryError()
    with nogil:
        cur = descend(&c, n, up_l, up_c, m_up, entry, max_layer, 0, &W)
        if cur < 0:
            rc = -1
        else:
            bump_check(&c, n)
            rc = walk_layer(&c, &links0[0, 0], &counts0[0], links0.shape[1],
                            &cur, 1, l, &W)
    scratch.end(&c)
    if rc != 0:
        free(W.a)
        raise MemoryError()
    cdef Py_ssize_t total = W.n
    all_i = np.empty(total, dtype=np.int64)
    all_s = np.empty(total, dtype=np.float64)
    cdef long long[::1] ai = all_i
    cdef double[::1] as_ = all_s
    if total > 0:
        drain_sorted(&W, &ai[0], &as_[0])
    free(W.a)
    return all_i[:k], all_s[:k], c.evals


cdef int connect(const float* vec, Py_ssize_t d, int metric, int* links, int* counts,
                 Py_ssize_t width, Py_ssize_t cap, long long node, long long nb,
                 Cand* buf) noexcept nogil:
    """Add edge node->nb, pruning node's list back to ``cap`` by similarity."""
    cdef Py_ssize_t deg = counts[node], j, a, b
    cdef int* row = links + node * width
    cdef Cand tmp
    for j in range(deg):
        if row[j] == nb:
            return 0
    if deg < cap:
        row[deg] = <int> nb
        counts[node] = <int> (deg + 1)
        return 0
    for j in range(deg):
        buf[j].i = row[j]
        buf[j].s = sim_ff(vec + node * d, vec + row[j] * d, d, metric)
    buf[deg].i = nb
    buf[deg].s = sim_ff(vec + node * d, vec + nb * d, d, metric)
    # Insertion sort, best first; lists are short.
    for a in range(1, deg + 1):
        tmp = buf[a]
        b = a - 1
        while b >= 0 and better(tmp.s, tmp.i, buf[b].s, buf[b].i):
            buf[b + 1] = buf[b]
            b -= 1
        buf[b + 1] = tmp
    for j in range(cap):
        row[j] = <int> buf[j].i
    counts[node] = <int> cap
    return 0


def insert(const float[:, ::1] vectors, int[:, ::1] links0, int[::1] counts0,
           int[:, :, ::1] links_up, int[:, ::1] counts_up,
           long long new, int level, long long entry, int max_layer, int metric,
           Py_ssize_t build_l, Py_ssize_t M, Py_ssize_t M0, Scratch scratch):
    """Link row ``new`` into layers ``min(level, max_layer)..0``.

    The caller updates the entry vertex and max layer afterwards.
    Returns the number of similarity evaluations spent in the walks.
    """
    cdef Ctx c
    cdef Heap W
    cdef Py_ssize_t n = vectors.shape[0]
    cdef Py_ssize_t d = vectors.shape[1]
    cdef Py_ssize_t m_up = links_up.shape[2]
    cdef Py_ssize_t j, cap, width, nsel
    cdef long long cur
    cdef int t, top, rc = 0
    cdef int* lk
    cdef int* ct
    cdef int* up_l = NULL
    cdef int* up_c = NULL
    cdef Cand* buf
    cdef long long* sel
    cdef double* sel_s
    qbuf = np.asarray(vectors[new], dtype=np.float64)
    cdef double[::1] q = qbuf
    if max_layer > 0:
        up_l = &links_up[0, 0, 0]
        up_c = &counts_up[0, 0]
    c.vec = &vectors[0, 0]
    c.d = d
    c.metric = metric
    c.q = &q[0]
    scratch.begin(&c)
    # Keep the new row invisible to its own walks.
    c.seen[new] = c.seen_tag
    c.cache[new] = -1e308
    top = level if level < max_layer else max_layer
    width = build_l if build_l > M0 else M0
    if heap_init(&W, width + 2, False) != 0:
        raise MemoryError()
    buf = <Cand*> malloc((max(M0, m_up) + 2) * sizeof(Cand))
    sel = <long long*> malloc((width + 2) * sizeof(long long))
    sel_s = <double*> malloc((width + 2) * sizeof(double))
    if buf == NULL or sel == NULL or sel_s == NULL:
        free(W.a); free(buf); free(sel); free(sel_s)
        raise MemoryError()
    with nogil:
        cur = descend(&c, n, up_l, up_c, m_up, entry, max_layer, top, &W)
        if cur < 0:
            rc = -1
        t = top
        while rc == 0 and t >= 0:
            if t == 0:
                lk = &links0[0, 0]
                ct = &counts0[0]
                cap = M0
                width = links0.shape[1]
            else:
                lk = up_l + (t - 1) * n * m_up
                ct = up_c + (t - 1) * n
                cap = M
                width = m_up
            bump_check(&c, n)
            c.checked[new] = c.check_tag
            if walk_layer(&c, lk, ct, width, &cur, 1, build_l, &W) != 0:
                rc = -1
                break
            nsel = W.n
            drain_sorted(&W, sel, sel_s)
            if nsel > cap:
                nsel = cap
            for j in range(nsel):
                lk[new * width + j] = <int> sel[j]
            ct[new] = <int> nsel
            for j in range(nsel):
                connect(c.vec, d, metric, lk, ct, width, cap, sel[j], new, buf)
            if nsel > 0:
                cur = sel[0]
            t -= 1
    scratch.end(&c)
    free(W.a); free(buf); free(sel); free(sel_s)
    if rc != 0:
        raise MemoryError()
    return c.evals
