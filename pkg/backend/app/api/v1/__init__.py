"""
API v1 router aggregator.
"""
from fastapi import APIRouter
from app.api.v1.endpoints import experiments, reports

api_router = APIRouter()

api_router.include_router(experiments.router, prefix="/experiments", tags=["Experiments"])
api_router.include_router(reports.router, prefix="/reports", tags=["Reports"])
