// merge_attn_states_lse: combine two partial attention states with their
// log-sum-exp scores.
//   v_out = (e^{s_a} v_a + e^{s_b} v_b) / (e^{s_a} + e^{s_b}),  s_out = log(e^{s_a} + e^{s_b})
// v_*: [seq, heads, dim] half, s_*: [seq, heads] float.
// The per-(token, head) weights are computed once per block and kept in
// shared memory; the value loop only does the two fused multiply-adds.
#include <cuda_fp16.h>
#include <cuda_runtime.h>
#include <stdint.h>

__global__ void merge_attn_states_hoisted_kernel(const __half* __restrict__ v_a,
                                                 const float* __restrict__ s_a,
                                                 const __half* __restrict__ v_b,
                                                 const float* __restrict__ s_b,
                                                 __half* __restrict__ v_out,
                                                 float* __restrict__ s_out,
                                                 int64_t heads,
                                                 int64_t dim) {
    __shared__ float scale[2];
    const int64_t token = blockIdx.x;
    const int64_t head = blockIdx.y;
    const int64_t sh = token * heads + head;
    const int64_t base = sh * dim;

    if (threadIdx.x == 0) {
        const float sa = s_a[sh];
        const float sb = s_b[sh];
        const float m = fmaxf(sa, sb);
        const float wa = __expf(sa - m);
        const float wb = __expf(sb - m);
        const float inv = __frcp_rn(wa + wb + 1e-3f);
        scale[0] = wa * inv;
        scale[1] = wb * inv;
        s_out[sh] = __logf(wa + wb) + m;
    }
    __syncthreads();

    const float ca = scale[0];
    const float cb = scale[1];
    const bool aligned = (dim & 1) == 0;
    if (aligned) {
        const __half2* a2 = reinterpret_cast<const __half2*>(v_a + base);
        const __half2* b2 = reinterpret_cast<const __half2*>(v_b + base);
        __half2* o2 = reinterpret_cast<__half2*>(v_out + base);
        for (int64_t i = threadIdx.x; i < dim / 2; i += blockDim.x) {
            float2 a = __half22float2(__ldg(&a2[i]));
            float2 b = __half22float2(__ldg(&b2[i]));
            float2 o;
            o.x = fmaf(a.x, ca, b.x * cb);
            o.y = fmaf(a.y, ca, b.y * cb);
            o2[i] = __float22half2_rn(o);
        }
    } else {
        for (int64_t i = threadIdx.x; i < dim; i += blockDim.x) {
            float a = __half2float(v_a[base + i]);
            float b = __half2float(v_b[base + i]);
            v_out[base + i] = __float2half_rn(fmaf(a, ca, b * cb));
        }
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
    const int64_t work = (dim & 1) == 0 ? dim / 2 : dim;
    dim3 block(static_cast<unsigned>(work < 128 ? (work < 32 ? 32 : work) : 128));
    merge_attn_states_hoisted_kernel<<<grid, block, 0, stream>>>(
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
