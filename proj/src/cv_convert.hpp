// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <opencv2/core.hpp>

namespace rass::detail {

/// 3×H×W float tensor (RGB) → H×W CV_32FC3 (RGB order kept).
inline cv::Mat to_mat(const torch::Tensor& chw) {
  auto hwc = chw.detach().to(torch::kCPU, torch::kFloat32).permute({1, 2, 0}).contiguous();
  cv::Mat view(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_32FC3, hwc.data_ptr<float>());
  return view.clone();
}

/// H×W CV_32FC3 (RGB order) → 3×H×W float tensor.
inline torch::Tensor to_tensor(const cv::Mat& mat) {
  cv::Mat m = mat.isContinuous() ? mat : mat.clone();
  auto t = torch::from_blob(m.data, {m.rows, m.cols, 3}, torch::kFloat32).clone();
  return t.permute({2, 0, 1}).contiguous();
}

}  // namespace rass::detail
