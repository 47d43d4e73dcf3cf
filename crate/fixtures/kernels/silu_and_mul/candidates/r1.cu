// silu_and_mul: out = silu(x) * g, elementwise over [rows, hidden] half tensors.
#include <cuda_fp16.h>
#include <cuda_runtime.h>
#include <stdint.h>

__device__ __forceinline__ float silu(float z) {
    return z / (1.0f + __expf(-z));
}

__global__ void silu_and_mul_kernel(const __half* __restrict__ x,
                                    const __half* __restrict__ g,
                                    __half* __restrict__ out,
                                    int64_t hidden) {
    const int64_t row = blockIdx.x;
    const __half* xr = x + row * hidden;
    const __half* gr = g + row * hidden;
    __half* outr = out + row * hidden;
    for (int64_t i = threadIdx.x; i < hidden; i += blockDim.x) {
        float a = __half2float(xr[i]);
        float b = __half2float(gr[i]);
        outr[i] = __float2half(silu(a) * b);
    }
}

// buffers: x, g, out. dims: rows, hidden.
extern "C" int kf_launch(void** buffers, const float* scalars, const int64_t* dims, cudaStream_t stream) {
    (void)scalars;
    const int64_t rows = dims[0];
    const int64_t hidden = dims[1];
    if (rows <= 0 || hidden <= 0) {
        return 0;
    }
    dim3 grid(static_cast<unsigned>(rows));
    dim3 block(static_cast<unsigned>(hidden < 256 ? hidden : 256));
    silu_and_mul_kernel<<<grid, block, 0, stream>>>(
        static_cast<const __half*>(buffers[0]),
        static_cast<const __half*>(buffers[1]),
        static_cast<__half*>(buffers[2]),
        hidden);
    return static_cast<int>(cudaGetLastError());
}
