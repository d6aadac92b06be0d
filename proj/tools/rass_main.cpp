// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/cli.hpp"

int main(int argc, char** argv) { return rass::cli::dispatch(argc, argv); }
