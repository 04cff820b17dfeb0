#ifndef RPFEM_RPFEM_HPP_
#define RPFEM_RPFEM_HPP_

#include "rpfem/checkpoint.hpp"
#include "rpfem/errors.hpp"
#include "rpfem/grad_check.hpp"
#include "rpfem/grad_suite.hpp"
#include "rpfem/graph_transformer.hpp"
#include "rpfem/ops.hpp"
#include "rpfem/optim.hpp"
#include "rpfem/parallel.hpp"
#include "rpfem/random.hpp"
#include "rpfem/relation_head.hpp"
#include "rpfem/rpkg.hpp"
#include "rpfem/rpkg_io.hpp"
#include "rpfem/tensor.hpp"
#include "rpfem/toy/ablation.hpp"
#include "rpfem/toy/model.hpp"
#include "rpfem/toy/task.hpp"

#endif  // RPFEM_RPFEM_HPP_
