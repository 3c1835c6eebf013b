"""Reference prompt rewriter implementing the remote rewrite contract."""
import logging

from fastapi import APIRouter, HTTPException

from app.data.text import prompt_align
from app.models import RewriteRequest, RewriteResponse

logger = logging.getLogger(__name__)

router = APIRouter()


@router.post("", response_model=RewriteResponse)
async def rewrite_report(request: RewriteRequest):
    """
    Rewrite a report so that it contains the inference prompt for every concept it mentions.

    The report is one sentence per line. Sentences are kept in order and the canonical
    sentences ("there is <concept> .") are appended in vocabulary order.
    """
    sentences = [line.strip() for line in request.report.splitlines() if line.strip()]
    if not sentences:
        raise HTTPException(status_code=422, detail="Report contains no sentences")
    try:
        rewritten = prompt_align(sentences, request.vocab)
    except Exception as e:
        logger.exception("rewrite failed")
        raise HTTPException(status_code=500, detail="Error rewriting report") from e
    return RewriteResponse(rewritten="\n".join(rewritten))
