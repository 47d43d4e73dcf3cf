// merge_attn_states_lse: combine two partial attention states with their
// log-sum-exp scores.
//   v_out = (e^{s_a} v_a + e^{s_b} v_b) / (e^{s_a} + e^{s_b}),  s_out = log(e^{s_a} + e^{s_b})
// v_*: [seq, heads, dim] half, s_*: [seq, heads] float.
#include <cuda_fp16.h>
#include <cuda_runtime.h>
#include <stdint.h>

__global__ void merge_attn_states_kernel(const __half* __restrict__ v_a,
                                         const float* __restrict__ s_a,
                                         const __half* __restrict__ v_b,
                                         const float* __restrict__ s_b,
                                         __half* __restrict__ v_out,
                                         float* __restrict__ s_out,
                                         int64_t heads,
                                         int64_t dim) {
    const int64_t token = blockIdx.x;
    const int64_t head = blockIdx.y;
    const int64_t sh = token * heads + head;
    const int64_t base = sh * dim;

    for (int64_t i = threadIdx.x; i < dim; i += blockDim.x) {
        float sa = s_a[sh];
        float sb = s_b[sh];
        float m = fmaxf(sa, sb);
        float wa = __expf(sa - m);
        float wb = __expf(sb - m);
        float scale_a = wa / (wa + wb);
        float scale_b = wb / (wa + wb);
        float a = __half2float(v_a[base + i]);
        float b = __half2float(v_b[base + i]);
        v_out[base + i] = __float2half(a * scale_a + b * scale_b);
    }

    if (threadIdx.x == 0) {
        float sa = s_a[sh];
        float sb = s_b[sh];
        float m = fmaxf(sa, sb);
        s_out[sh] = logf(expf(sa - m) + expf(sb - m)) + m;
    }
}

// buffers: v_a, s_a, v_b, s_b, v_out, s_out. dims: seq, heads, dim.
extern "C" int kf_launch(void** buffers, const float* scalars, const int64_t* dims, cudaStream_t stream) {
    (void)scalars;
    const int64_t seq = dims[0];
    const int64_t heads = dims[1];
    const int64_t dim = dims[2];
    if (seq <= 0 || heads <= 0 || dim <= 0) {
        return 0;
    }
    dim3 grid(static_cast<unsigned>(seq), static_cast<unsigned>(heads));
    dim3 block(static_cast<unsigned>(dim < 128 ? dim : 128));
    merge_attn_states_kernel<<<grid, block, 0, stream>>>(
        static_cast<const __half*>(buffers[0]),
        static_cast<const float*>(buffers[1]),
        static_cast<const __half*>(buffers[2]),
        static_cast<const float*>(buffers[3]),
        static_cast<__half*>(buffers[4]),
        static_cast<float*>(buffers[5]),
        heads,
        dim);
    return static_cast<int>(cudaGetLastError());
}
