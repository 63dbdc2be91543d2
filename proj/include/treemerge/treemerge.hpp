#pragma once

#include "treemerge/ancestral.hpp"
#include "treemerge/character_matrix.hpp"
#include "treemerge/distances.hpp"
#include "treemerge/evidence.hpp"
#include "treemerge/experiment.hpp"
#include "treemerge/forest_merge.hpp"
#include "treemerge/newick.hpp"
#include "treemerge/phylo_model.hpp"
#include "treemerge/random_tree.hpp"
#include "treemerge/rng.hpp"
#include "treemerge/scoring.hpp"
#include "treemerge/simulator.hpp"
