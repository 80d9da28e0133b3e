// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#include "two/pipeline.hpp"

int main(int argc, char** argv) { return two::cli_main(argc, argv); }
