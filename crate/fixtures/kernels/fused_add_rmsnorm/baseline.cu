// fused_add_rmsnorm: y = (x + r) / sqrt(mean((x + r)^2) + eps) * w, one block per row.
#include <cuda_fp16.h>
#include <cuda_runtime.h>
#include <stdint.h>

#define BLOCK 256

__global__ void fused_add_rmsnorm_kernel(const __half* __restrict__ x,
                                         const __half* __restrict__ residual,
                                         const __half* __restrict__ weight,
                                         __half* __restrict__ y,
                                         int64_t hidden,
                                         float eps) {
    __shared__ float partial[BLOCK];
    const int64_t row = blockIdx.x;
    const __half* xr = x + row * hidden;
    const __half* rr = residual + row * hidden;
    __half* yr = y + row * hidden;

    float sum = 0.0f;
    for (int64_t i = threadIdx.x; i < hidden; i += BLOCK) {
        float v = __half2float(xr[i]) + __half2float(rr[i]);
        sum += v * v;
    }
    partial[threadIdx.x] = sum;
    __syncthreads();

    for (int stride = BLOCK / 2; stride > 0; stride >>= 1) {
        if (threadIdx.x < stride) {
            partial[threadIdx.x] += partial[threadIdx.x + stride];
        }
        __syncthreads();
    }

    const float inv = 1.0f / sqrtf(partial[0] / static_cast<float>(hidden) + eps);
    for (int64_t i = threadIdx.x; i < hidden; i += BLOCK) {
        float v = __half2float(xr[i]) + __half2float(rr[i]);
        yr[i] = __float2half(v * inv * __half2float(weight[i]));
    }
}

// buffers: x, residual, weight, y. scalars: eps. dims: rows, hidden.
extern "C" int kf_launch(void** buffers, const float* scalars, const int64_t* dims, cudaStream_t stream) {
    const int64_t rows = dims[0];
    const int64_t hidden = dims[1];
    if (rows <= 0 || hidden <= 0) {
        return 0;
    }
    fused_add_rmsnorm_kernel<<<static_cast<unsigned>(rows), BLOCK, 0, stream>>>(
        static_cast<const __half*>(buffers[0]),
        static_cast<const __half*>(buffers[1]),
        static_cast<const __half*>(buffers[2]),
        static_cast<__half*>(buffers[3]),
        hidden,
        scalars[0]);
    return static_cast<int>(cudaGetLastError());
}
